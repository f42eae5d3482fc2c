//! Membership-inference attack primitives.
//!
//! All scores follow one orientation: higher means "more likely a member".

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::loss::{loss_ceiling, PROB_FLOOR};
use crate::oracle::{sample_losses, PredictionOracle};
use crate::stats::{mean, sample_std};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackTag {
    Global,
    PerSample,
}

impl std::fmt::Display for AttackTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackTag::Global => "global",
            AttackTag::PerSample => "per-sample",
        })
    }
}

impl std::str::FromStr for AttackTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(AttackTag::Global),
            "per-sample" | "per_sample" => Ok(AttackTag::PerSample),
            other => Err(Error::Config(format!("unknown attack {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    Fixed(f64),
    Calibrated,
    /// Mean score difference; the randomized global attack in expectation.
    Expectation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaConfig {
    /// Loss bound `B` of the global attack.
    pub loss_bound: f64,
    /// Probability clamp `ε_p` before the logit transform.
    pub logit_clamp: f64,
    pub sigma_floor: f64,
    pub threshold_mode: ThresholdMode,
}

impl Default for MiaConfig {
    fn default() -> Self {
        Self {
            loss_bound: loss_ceiling(),
            logit_clamp: PROB_FLOOR,
            sigma_floor: 1e-6,
            threshold_mode: ThresholdMode::Calibrated,
        }
    }
}

impl MiaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loss_bound > 0.0 && self.loss_bound.is_finite()) {
            return Err(Error::Config("loss bound B must be positive".into()));
        }
        if !(self.logit_clamp > 0.0 && self.logit_clamp < 0.5) {
            return Err(Error::Config("logit clamp must lie in (0, 0.5)".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma floor must be positive".into()));
        }
        Ok(())
    }
}

/// Expected output of the loss-threshold attack: `1 - min(ℓ, B) / B`.
pub fn global_score_from_loss(loss: f64, bound: f64) -> f64 {
    1.0 - loss.min(bound) / bound
}

pub fn global_scores(oracle: &dyn PredictionOracle, samples: &Dataset, bound: f64) -> Result<Vec<f64>> {
    if !(bound > 0.0) {
        return Err(Error::Domain("loss bound must be positive".into()));
    }
    Ok(sample_losses(oracle, samples)?
        .into_iter()
        .map(|l| global_score_from_loss(l, bound))
        .collect())
}

/// `ln(p / (1 - p))` with `p = exp(-ℓ)` clamped to `[ε_p, 1 - ε_p]`.
pub fn logit_confidence_from_loss(loss: f64, clamp: f64) -> f64 {
    let lo = -(-clamp).ln_1p(); // loss at p = 1 - ε_p
    let hi = -clamp.ln(); // loss at p = ε_p
    let l = loss.clamp(lo, hi);
    // ln p - ln(1 - p), with 1 - p = -expm1(-ℓ)
    -l - (-(-l).exp_m1()).ln()
}

pub fn logit_confidences(oracle: &dyn PredictionOracle, samples: &Dataset, clamp: f64) -> Result<Vec<f64>> {
    Ok(sample_losses(oracle, samples)?
        .into_iter()
        .map(|l| logit_confidence_from_loss(l, clamp))
        .collect())
}

/// Gaussian fits of one sample's logit confidence under in- and out-models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussPair {
    pub mu_in: f64,
    pub sigma_in: f64,
    pub mu_out: f64,
    pub sigma_out: f64,
    pub n_in: usize,
    pub n_out: usize,
}

pub fn fit_gauss_pair(inside: &[f64], outside: &[f64], sigma_floor: f64) -> Result<GaussPair> {
    if inside.len() < 2 || outside.len() < 2 {
        return Err(Error::InsufficientShadows(format!(
            "need at least 2 observations per side, got {} in and {} out",
            inside.len(),
            outside.len()
        )));
    }
    Ok(GaussPair {
        mu_in: mean(inside),
        sigma_in: sample_std(inside).max(sigma_floor),
        mu_out: mean(outside),
        sigma_out: sample_std(outside).max(sigma_floor),
        n_in: inside.len(),
        n_out: outside.len(),
    })
}

fn log_normal_density(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (std::f64::consts::TAU).ln()
}

/// `ln N(φ; μ_in, σ_in²) - ln N(φ; μ_out, σ_out²)`, clamped to ±700.
pub fn lira_log_score(phi: f64, pair: &GaussPair) -> f64 {
    let lr = log_normal_density(phi, pair.mu_in, pair.sigma_in)
        - log_normal_density(phi, pair.mu_out, pair.sigma_out);
    lr.clamp(-700.0, 700.0)
}

/// Likelihood ratio of membership for confidence `φ`.
pub fn lira_score(phi: f64, pair: &GaussPair) -> f64 {
    lira_log_score(phi, pair).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    pub attack: AttackTag,
}

impl ScoreSet {
    pub fn new(member_scores: Vec<f64>, nonmember_scores: Vec<f64>, attack: AttackTag) -> Self {
        Self { member_scores, nonmember_scores, attack }
    }

    fn check(&self) -> Result<()> {
        if self.member_scores.is_empty() || self.nonmember_scores.is_empty() {
            return Err(Error::Domain("advantage needs member and non-member scores".into()));
        }
        Ok(())
    }
}

/// Outcome counts of the thresholded attack (`score > t` means "member").
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdvantageCounts {
    pub true_positives: usize,
    pub members: usize,
    pub false_positives: usize,
    pub nonmembers: usize,
}

impl AdvantageCounts {
    pub fn tpr(&self) -> f64 {
        self.true_positives as f64 / self.members as f64
    }

    pub fn fpr(&self) -> f64 {
        self.false_positives as f64 / self.nonmembers as f64
    }

    pub fn value(&self) -> f64 {
        self.tpr() - self.fpr()
    }
}

pub fn advantage_counts(scores: &ScoreSet, threshold: f64) -> Result<AdvantageCounts> {
    scores.check()?;
    Ok(AdvantageCounts {
        true_positives: scores.member_scores.iter().filter(|&&s| s > threshold).count(),
        members: scores.member_scores.len(),
        false_positives: scores.nonmember_scores.iter().filter(|&&s| s > threshold).count(),
        nonmembers: scores.nonmember_scores.len(),
    })
}

/// `TPR - FPR` at `threshold`.
pub fn advantage(scores: &ScoreSet, threshold: f64) -> Result<f64> {
    Ok(advantage_counts(scores, threshold)?.value())
}

/// Mean member score minus mean non-member score.
pub fn expectation_advantage(scores: &ScoreSet) -> Result<f64> {
    scores.check()?;
    Ok(mean(&scores.member_scores) - mean(&scores.nonmember_scores))
}

/// Advantage under the configured threshold mode. `Calibrated` calibrates on
/// the same scores.
pub fn advantage_with(scores: &ScoreSet, mode: ThresholdMode) -> Result<f64> {
    match mode {
        ThresholdMode::Fixed(t) => advantage(scores, t),
        ThresholdMode::Calibrated => Ok(calibrate_threshold(scores)?.advantage),
        ThresholdMode::Expectation => expectation_advantage(scores),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub advantage: f64,
}

/// Threshold maximizing `TPR - FPR` among midpoints of consecutive distinct
/// scores and one threshold below every score (advantage 0); ties go to the
/// smaller threshold. When every score is equal the threshold is that value
/// and the advantage is 0.
pub fn calibrate_threshold(scores: &ScoreSet) -> Result<Calibration> {
    scores.check()?;
    let mut all: Vec<(f64, bool)> = scores
        .member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nonmember_scores.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let m = scores.member_scores.len() as f64;
    let n = scores.nonmember_scores.len() as f64;
    // sweep upward: after passing a group of equal scores, those are at or below t
    let (mut tp, mut fp) = (m, n);
    let below = all[0].0 - 1.0;
    let below = if below < all[0].0 { below } else { f64::NEG_INFINITY };
    let mut best = Calibration { threshold: below, advantage: 0.0 };
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp -= 1.0;
            } else {
                fp -= 1.0;
            }
            i += 1;
        }
        if i == all.len() {
            break;
        }
        let t = 0.5 * (v + all[i].0);
        let t = if t.is_finite() { t } else { v + 0.5 * (all[i].0 - v) };
        let adv = tp / m - fp / n;
        if adv > best.advantage {
            best = Calibration { threshold: t, advantage: adv };
        }
    }
    if all[0].0 == all[all.len() - 1].0 {
        best.threshold = all[0].0;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_score_examples() {
        assert_eq!(global_score_from_loss(0.0, 8.0), 1.0);
        assert_eq!(global_score_from_loss(9.0, 8.0), 0.0);
        assert_eq!(global_score_from_loss(2.0, 8.0), 0.75);
    }

    #[test]
    fn logit_confidence_examples() {
        assert!(logit_confidence_from_loss(2f64.ln(), 1e-12).abs() < 1e-15);
        let top = logit_confidence_from_loss(0.0, 1e-12);
        assert!((top - 27.631021115928547).abs() < 1e-9, "{top}");
        let bottom = logit_confidence_from_loss(100.0, 1e-12);
        assert!((bottom + 27.631021115928547).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for i in 1..200 {
            let v = logit_confidence_from_loss(i as f64 * 0.1, 1e-12);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn gauss_pair_fits() {
        let p = fit_gauss_pair(&[1.0, 1.0, 1.0], &[0.0, 2.0], 1e-6).unwrap();
        assert_eq!(p.mu_in, 1.0);
        assert_eq!(p.sigma_in, 1e-6);
        assert_eq!(p.mu_out, 1.0);
        assert!((p.sigma_out - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(fit_gauss_pair(&[1.0, 2.0], &[0.0], 1e-6), Err(Error::InsufficientShadows(_))));
    }

    #[test]
    fn lira_examples() {
        let same = GaussPair { mu_in: 0.3, sigma_in: 2.0, mu_out: 0.3, sigma_out: 2.0, n_in: 2, n_out: 2 };
        for phi in [-5.0, 0.0, 3.0] {
            assert_eq!(lira_score(phi, &same), 1.0);
        }
        let p = GaussPair { mu_in: 2.0, sigma_in: 1.0, mu_out: 0.0, sigma_out: 1.0, n_in: 2, n_out: 2 };
        assert!((lira_score(1.0, &p) - 1.0).abs() < 1e-15);
        assert!((lira_score(2.0, &p) - 2f64.exp()).abs() < 1e-12);
        let tight = GaussPair { sigma_in: 1e-6, sigma_out: 1e-6, ..p };
        assert_eq!(lira_score(2.0, &tight), 700f64.exp());
        assert!(lira_score(0.0, &tight) > 0.0);
    }

    #[test]
    fn lira_swap_symmetry() {
        let p = GaussPair { mu_in: 1.3, sigma_in: 0.7, mu_out: -0.4, sigma_out: 1.9, n_in: 5, n_out: 6 };
        let q = GaussPair { mu_in: p.mu_out, sigma_in: p.sigma_out, mu_out: p.mu_in, sigma_out: p.sigma_in, ..p };
        for phi in [-3.0, -0.1, 0.5, 2.2] {
            assert!((lira_score(phi, &p) * lira_score(phi, &q) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_examples() {
        let sep = ScoreSet::new(vec![1.0; 4], vec![0.0; 3], AttackTag::Global);
        let c = calibrate_threshold(&sep).unwrap();
        assert_eq!((c.threshold, c.advantage), (0.5, 1.0));

        let same = ScoreSet::new(vec![0.2, 0.4, 0.6], vec![0.2, 0.4, 0.6], AttackTag::Global);
        assert_eq!(calibrate_threshold(&same).unwrap().advantage, 0.0);

        let flat = ScoreSet::new(vec![0.3; 3], vec![0.3; 2], AttackTag::Global);
        assert_eq!(calibrate_threshold(&flat).unwrap(), Calibration { threshold: 0.3, advantage: 0.0 });

        // Brute force over every threshold between observed scores: the optimum
        // is TPR 3/3, FPR 1/3 at the midpoint 0.35.
        let s = ScoreSet::new(vec![0.9, 0.6, 0.4], vec![0.7, 0.3, 0.1], AttackTag::Global);
        let c = calibrate_threshold(&s).unwrap();
        assert!((c.threshold - 0.35).abs() < 1e-15);
        assert!((c.advantage - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn advantage_examples() {
        let s = ScoreSet::new(vec![0.9, 0.6, 0.4], vec![0.7, 0.3, 0.1], AttackTag::Global);
        assert!((advantage(&s, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let sep = ScoreSet::new(vec![1.0, 1.0], vec![0.0], AttackTag::Global);
        assert_eq!(advantage(&sep, 0.5).unwrap(), 1.0);
        let same = ScoreSet::new(vec![0.1, 0.8], vec![0.1, 0.8], AttackTag::Global);
        assert_eq!(advantage(&same, 0.5).unwrap(), 0.0);
        assert!(advantage(&ScoreSet::new(vec![], vec![1.0], AttackTag::Global), 0.5).is_err());
        let e = advantage_with(&s, ThresholdMode::Expectation).unwrap();
        assert!((e - (1.9 / 3.0 - 1.1 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn expectation_matches_loss_difference() {
        let bound = 27.631021115928547;
        let member_losses = [0.01, 0.2, 1.5, 0.0];
        let nonmember_losses = [0.9, 3.0, 40.0];
        let ms: Vec<f64> = member_losses.iter().map(|&l| global_score_from_loss(l, bound)).collect();
        let ns: Vec<f64> = nonmember_losses.iter().map(|&l| global_score_from_loss(l, bound)).collect();
        let adv = expectation_advantage(&ScoreSet::new(ms, ns, AttackTag::Global)).unwrap();
        let clip = |l: f64| l.min(bound) / bound;
        let loss_form = nonmember_losses.iter().map(|&l| clip(l)).sum::<f64>() / 3.0
            - member_losses.iter().map(|&l| clip(l)).sum::<f64>() / 4.0;
        assert!((adv - loss_form).abs() < 1e-15);
    }
}
