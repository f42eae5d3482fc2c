//! Rényi-DP accounting for the subsampled Gaussian mechanism, conversion to
//! (ε, δ), and the lower bound that ε-DP places on ownership-test p-values.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::normal_sf;

/// Integer orders 2..=64.
pub fn default_orders() -> Vec<f64> {
    (2..=64).map(f64::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpProfile {
    pub orders: Vec<f64>,
    pub rdp_values: Vec<f64>,
    pub steps: usize,
    pub q: f64,
    pub z: f64,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    // exact enough for n <= a few hundred
    let mut acc = 0.0;
    for i in 0..k {
        acc += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    acc
}

/// One-step RDP of the Poisson-subsampled Gaussian at integer order `alpha`:
/// `ln( Σ_k C(α,k) (1-q)^(α-k) q^k exp((k²-k) / (2z²)) ) / (α-1)`.
fn subsampled_step(q: f64, z: f64, alpha: u64) -> f64 {
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let mut log_a = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        let term = ln_binomial(alpha, k)
            + (alpha - k) as f64 * ln_1mq
            + kf * ln_q
            + (kf * kf - kf) / (2.0 * z * z);
        log_a = log_add(log_a, term);
    }
    (log_a / (alpha - 1) as f64).max(0.0)
}

/// RDP curve of `steps` compositions of the subsampled Gaussian mechanism with
/// sampling rate `q` and noise multiplier `z`. At `q = 1` this is exactly
/// `steps * α / (2 z²)`; for `q < 1` the orders must be integers.
pub fn rdp_subsampled_gaussian(q: f64, z: f64, steps: usize, orders: &[f64]) -> Result<RdpProfile> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling rate {q} outside (0, 1]")));
    }
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Domain(format!("noise multiplier {z} must be positive")));
    }
    if steps == 0 {
        return Err(Error::Domain("steps must be at least 1".into()));
    }
    if orders.is_empty() {
        return Err(Error::Domain("no RDP orders given".into()));
    }
    let mut rdp_values = Vec::with_capacity(orders.len());
    for &alpha in orders {
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(Error::Domain(format!("RDP order {alpha} must exceed 1")));
        }
        let total = if q == 1.0 {
            steps as f64 * alpha / (2.0 * z * z)
        } else {
            if alpha.fract() != 0.0 {
                return Err(Error::Domain(format!(
                    "order {alpha}: subsampled bound needs integer orders"
                )));
            }
            subsampled_step(q, z, alpha as u64) * steps as f64
        };
        rdp_values.push(total);
    }
    if rdp_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("RDP overflow; use smaller orders or more noise".into()));
    }
    Ok(RdpProfile {
        orders: orders.to_vec(),
        rdp_values,
        steps,
        q,
        z,
    })
}

/// `ε = min_α rdp(α) + ln(1/δ) / (α - 1)`, returning the minimizing order too.
pub fn rdp_to_epsilon(profile: &RdpProfile, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta {delta} outside (0, 1)")));
    }
    if profile.orders.is_empty() || profile.orders.len() != profile.rdp_values.len() {
        return Err(Error::Domain("empty or inconsistent RDP profile".into()));
    }
    let log_inv_delta = -delta.ln();
    profile
        .orders
        .iter()
        .zip(&profile.rdp_values)
        .map(|(&a, &r)| (r + log_inv_delta / (a - 1.0), a))
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .ok_or_else(|| Error::Domain("empty RDP profile".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpBoundPoint {
    pub epsilon: f64,
    pub n_s: usize,
    pub sigma_sq_sum: f64,
    pub min_p: f64,
}

/// Smallest p-value an ε-DP model can produce:
/// `1 - Φ((e^ε - 1) · sqrt(n_S) / sqrt(σ0² + σ1²))`.
pub fn min_pvalue_bound(epsilon: f64, n_s: usize, sigma0: f64, sigma1: f64) -> Result<f64> {
    if !(sigma0 > 0.0 && sigma1 > 0.0) {
        return Err(Error::Domain("score deviations must be positive".into()));
    }
    min_pvalue_bound_for(epsilon, n_s, sigma0 * sigma0 + sigma1 * sigma1)
}

/// As [`min_pvalue_bound`], given `σ0² + σ1²` directly.
pub fn min_pvalue_bound_for(epsilon: f64, n_s: usize, sigma_sq_sum: f64) -> Result<f64> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon {epsilon} must be finite and >= 0")));
    }
    if n_s == 0 {
        return Err(Error::Domain("n_S must be at least 1".into()));
    }
    if !(sigma_sq_sum > 0.0 && sigma_sq_sum.is_finite()) {
        return Err(Error::Domain("σ0² + σ1² must be positive".into()));
    }
    let z = epsilon.exp_m1() * (n_s as f64).sqrt() / sigma_sq_sum.sqrt();
    Ok(normal_sf(z))
}

/// Bound table for every `(ε, n_S)` pair, sorted by `(n_S, ε)`.
pub fn bound_curve(
    epsilons: &[f64],
    n_s_list: &[usize],
    sigma0: f64,
    sigma1: f64,
) -> Result<Vec<DpBoundPoint>> {
    if epsilons.is_empty() || n_s_list.is_empty() {
        return Err(Error::Domain("bound grids must be nonempty".into()));
    }
    let sigma_sq_sum = sigma0 * sigma0 + sigma1 * sigma1;
    let mut ns = n_s_list.to_vec();
    ns.sort_unstable();
    let mut eps = epsilons.to_vec();
    eps.sort_by(|a, b| a.total_cmp(b));
    let mut rows = Vec::with_capacity(ns.len() * eps.len());
    for &n in &ns {
        for &e in &eps {
            rows.push(DpBoundPoint {
                epsilon: e,
                n_s: n,
                sigma_sq_sum,
                min_p: min_pvalue_bound(e, n, sigma0, sigma1)?,
            });
        }
    }
    Ok(rows)
}

/// CSV with header `epsilon,n_s,sigma_sq_sum,min_p`, floats at 17 significant digits.
pub fn write_bound_csv<W: Write>(rows: &[DpBoundPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epsilon,n_s,sigma_sq_sum,min_p")?;
    for r in rows {
        writeln!(
            out,
            "{:.16e},{},{:.16e},{:.16e}",
            r.epsilon, r.n_s, r.sigma_sq_sum, r.min_p
        )?;
    }
    Ok(())
}
