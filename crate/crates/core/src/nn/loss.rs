//! Softmax, cross-entropy and the per-example training objectives.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Largest per-example cross-entropy, `-ln(PROB_FLOOR)` ≈ 27.631.
pub fn loss_ceiling() -> f64 {
    -PROB_FLOOR.ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// `softmax(logits / temperature)`.
pub fn softmax_tempered(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return softmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    softmax(&scaled)
}

/// Temperature-softened view of a probability vector, treating `ln p` as logits.
/// At `temperature == 1` the input is returned unchanged.
pub fn soften_probs(probs: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return probs.to_vec();
    }
    let logits: Vec<f64> = probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
    softmax_tempered(&logits, temperature)
}

#[inline]
pub fn nll(p: f64) -> f64 {
    -p.clamp(PROB_FLOOR, 1.0).ln()
}

/// Per-example cross-entropy `-ln p[y]`, with `p` clamped to `[1e-12, 1]`.
pub fn ce_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    probs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(row, (p, &y))| {
            if y >= p.len() {
                return Err(Error::Label {
                    row,
                    label: y,
                    classes: p.len(),
                });
            }
            Ok(nll(p[y]))
        })
        .collect()
}

/// Mix of a hard-label term and a temperature-softened soft-target term:
/// `hard_weight * CE(y, softmax(z)) + soft_weight * CE(t, softmax(z / temperature))`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossSpec {
    pub hard_weight: f64,
    pub soft_weight: f64,
    pub temperature: f64,
}

impl LossSpec {
    pub fn supervised() -> Self {
        Self {
            hard_weight: 1.0,
            soft_weight: 0.0,
            temperature: 1.0,
        }
    }

    /// Pure soft-target cross-entropy against the teacher's distribution.
    pub fn soft_only() -> Self {
        Self {
            hard_weight: 0.0,
            soft_weight: 1.0,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hard_weight >= 0.0 && self.soft_weight >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.hard_weight + self.soft_weight <= 0.0 {
            return Err(Error::Config("loss weights must not both be zero".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// What one training example is fit against.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Target<'a> {
    Hard(usize),
    /// `soft` is already softened at `spec.temperature`.
    Mixed {
        label: usize,
        soft: &'a [f64],
        spec: LossSpec,
    },
}

/// Objective value and its gradient with respect to the logits.
pub(crate) fn loss_and_dlogits(logits: &[f64], target: Target<'_>) -> (f64, Vec<f64>) {
    match target {
        Target::Hard(y) => {
            let mut g = softmax(logits);
            let loss = nll(g[y]);
            g[y] -= 1.0;
            (loss, g)
        }
        Target::Mixed { label, soft, spec } => {
            let mut loss = 0.0;
            let mut grad = vec![0.0; logits.len()];
            if spec.hard_weight != 0.0 {
                let p = softmax(logits);
                loss += spec.hard_weight * nll(p[label]);
                for (c, (g, pc)) in grad.iter_mut().zip(&p).enumerate() {
                    let y = if c == label { 1.0 } else { 0.0 };
                    *g += spec.hard_weight * (pc - y);
                }
            }
            if spec.soft_weight != 0.0 {
                let tau = spec.temperature;
                let q = softmax_tempered(logits, tau);
                let ce: f64 = soft
                    .iter()
                    .zip(&q)
                    .map(|(t, qc)| if *t == 0.0 { 0.0 } else { t * nll(*qc) })
                    .sum();
                loss += spec.soft_weight * ce;
                for (g, (qc, t)) in grad.iter_mut().zip(q.iter().zip(soft)) {
                    *g += spec.soft_weight * (qc - t) / tau;
                }
            }
            (loss, grad)
        }
    }
}
