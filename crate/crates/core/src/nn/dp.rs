//! Differentially private training: per-example clipping plus Gaussian noise.

use serde::{Deserialize, Serialize};

use crate::accountant::{rdp_subsampled_gaussian, rdp_to_epsilon, default_orders};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::grad::Gradients;
use crate::nn::loss::{loss_and_dlogits, Target};
use crate::nn::train::{check_compatible, Optimizer, OptimizerState};
use crate::nn::MlpModel;
use crate::rng::{derive_seed, Stream};

/// Domain tag separating the noise streams from the shuffling streams.
const NOISE_DOMAIN: u64 = 0x6e6f_6973_6500_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Per-example L2 clipping threshold `C`.
    pub clip_threshold: f64,
    /// Noise multiplier `z`; the noise scale is always `z * C`.
    pub noise_multiplier: f64,
    pub target_delta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_dp_optimizer")]
    pub optimizer: Optimizer,
    pub seed: u64,
}

fn default_dp_optimizer() -> Optimizer {
    Optimizer::Sgd
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_threshold > 0.0 && self.clip_threshold.is_finite()) {
            return Err(Error::Config("clip threshold must be positive".into()));
        }
        if !(self.noise_multiplier > 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::Config("noise multiplier must be positive".into()));
        }
        if !(self.target_delta > 0.0 && self.target_delta < 1.0) {
            return Err(Error::Config("target delta must lie in (0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_threshold
    }

    /// `q = batch_size / n`, capped at 1.
    pub fn sampling_rate(&self, n: usize) -> f64 {
        (self.batch_size as f64 / n as f64).min(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct DpTrainOutcome {
    pub model: MlpModel,
    pub spent_epsilon: f64,
    pub best_order: f64,
    pub steps: usize,
    pub sampling_rate: f64,
    /// Largest per-example gradient norm observed after clipping, over every step.
    pub max_clipped_norm: f64,
}

/// Noisy clipped mini-batch training. For each batch `B`: every per-example
/// gradient is scaled to norm at most `C`, the clipped gradients are averaged,
/// and `N(0, (z·C / |B|)²)` noise is added to every coordinate of the average.
/// Batches come from the same per-epoch shuffles as [`crate::nn::train`].
pub fn dp_train(model: &MlpModel, data: &Dataset, config: &DpConfig) -> Result<DpTrainOutcome> {
    config.validate()?;
    check_compatible(model, data)?;
    let n = data.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let steps = batches_per_epoch * config.epochs;
    let q = config.sampling_rate(n);
    let profile = rdp_subsampled_gaussian(q, config.noise_multiplier, steps, &default_orders())?;
    let (spent_epsilon, best_order) = rdp_to_epsilon(&profile, config.target_delta)?;

    let mut model = model.clone();
    let mut opt = OptimizerState::new(config.optimizer, &model);
    let mut sum = Gradients::zeros_like(&model);
    let mut example = Gradients::zeros_like(&model);
    let mut max_clipped_norm: f64 = 0.0;
    let noise_seed = derive_seed(config.seed, NOISE_DOMAIN);
    let clip = config.clip_threshold;
    for epoch in 0..config.epochs {
        let order = Stream::derived(config.seed, epoch as u64).permutation(n);
        let mut noise = Stream::derived(noise_seed, epoch as u64);
        for batch in order.chunks(config.batch_size) {
            sum.fill_zero();
            for &i in batch {
                example.fill_zero();
                let cache = model.forward_cached(data.row(i));
                let (loss, dz) = loss_and_dlogits(cache.logits(), Target::Hard(data.labels()[i]));
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch: epoch + 1 });
                }
                model.backprop(&cache, &dz, 1.0, &mut example);
                let norm = example.l2_norm();
                if norm > clip {
                    example.scale(clip / norm);
                    // rounding can leave the norm an ulp or two above C
                    let mut shrink = 1.0 - f64::EPSILON;
                    while example.l2_norm() > clip {
                        example.scale(shrink);
                        shrink *= shrink;
                    }
                }
                max_clipped_norm = max_clipped_norm.max(example.l2_norm());
                sum.add_scaled(&example, 1.0);
            }
            let b = batch.len() as f64;
            let std = config.noise_std() / b;
            for g in sum.iter_mut() {
                *g = *g / b + std * noise.normal();
            }
            opt.step(&mut model, &sum, config.learning_rate);
        }
        if !model.is_finite() {
            return Err(Error::Divergence { epoch: epoch + 1 });
        }
    }
    Ok(DpTrainOutcome {
        model,
        spent_epsilon,
        best_order,
        steps,
        sampling_rate: q,
        max_clipped_norm,
    })
}
