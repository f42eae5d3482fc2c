use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::grad::Gradients;
use crate::nn::loss::{ce_loss, loss_and_dlogits, soften_probs, LossSpec, Target};
use crate::nn::{argmax, MlpModel};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(epoch, multiplier)` pairs, epochs 1-based and strictly increasing.
    /// From epoch `e` onward the rate is `learning_rate * multiplier`.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn adam(learning_rate: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate,
            epochs,
            batch_size,
            lr_schedule: Vec::new(),
            seed,
        }
    }

    pub fn sgd(learning_rate: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            optimizer: Optimizer::Sgd,
            ..Self::adam(learning_rate, epochs, batch_size, seed)
        }
    }

    /// A zero learning rate is accepted; it leaves the model unchanged.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        validate_schedule(&self.lr_schedule)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * schedule_multiplier(&self.lr_schedule, epoch)
    }
}

pub(crate) fn validate_schedule(schedule: &[(usize, f64)]) -> Result<()> {
    if schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Config("schedule epochs must be strictly increasing".into()));
    }
    if schedule.iter().any(|&(_, m)| !(m >= 0.0 && m.is_finite())) {
        return Err(Error::Config("schedule multipliers must be finite and >= 0".into()));
    }
    Ok(())
}

/// Multiplier in force at 1-based `epoch`.
pub(crate) fn schedule_multiplier(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .take_while(|(e, _)| *e <= epoch)
        .last()
        .map_or(1.0, |&(_, m)| m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

pub type History = Vec<EpochStats>;

/// Soft targets from a teacher, one probability row per training example.
#[derive(Debug, Clone)]
pub struct Distillation {
    pub teacher_probs: Vec<Vec<f64>>,
    pub loss: LossSpec,
}

/// Plain SGD or Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8, bias-corrected).
pub(crate) struct OptimizerState {
    kind: Optimizer,
    m: Option<Gradients>,
    v: Option<Gradients>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: Optimizer, model: &MlpModel) -> Self {
        let (m, v) = match kind {
            Optimizer::Sgd => (None, None),
            Optimizer::Adam => (Some(Gradients::zeros_like(model)), Some(Gradients::zeros_like(model))),
        };
        Self { kind, m, v, t: 0 }
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients, lr: f64) {
        self.t += 1;
        let params = model.params_mut();
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.zip(grads.iter()) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                let (m, v) = (self.m.as_mut().unwrap(), self.v.as_mut().unwrap());
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for (((p, g), mi), vi) in params.zip(grads.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                    *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

pub(crate) fn eval_metrics(model: &MlpModel, data: &Dataset) -> (f64, f64) {
    let rows = data.rows();
    let probs = model.forward_proba(&rows).expect("validated dataset");
    let losses = ce_loss(&probs, data.labels()).expect("validated labels");
    let correct = probs
        .iter()
        .zip(data.labels())
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    (
        losses.iter().sum::<f64>() / losses.len() as f64,
        correct as f64 / data.len() as f64,
    )
}

pub(crate) fn check_compatible(model: &MlpModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "dataset width {} does not match model input width {}",
            data.dim(),
            model.input_dim()
        )));
    }
    if data.classes() > model.classes() {
        return Err(Error::Shape(format!(
            "dataset has {} classes, model outputs {}",
            data.classes(),
            model.classes()
        )));
    }
    Ok(())
}

/// Mini-batch training. Epoch `e` (0-based) visits the rows in the order of
/// the permutation drawn from sub-stream `e` of `config.seed`.
pub fn train(
    model: &MlpModel,
    data: &Dataset,
    config: &TrainConfig,
    distill: Option<&Distillation>,
) -> Result<(MlpModel, History)> {
    train_with_eval(model, data, config, distill, None)
}

pub fn train_with_eval(
    model: &MlpModel,
    data: &Dataset,
    config: &TrainConfig,
    distill: Option<&Distillation>,
    eval: Option<&Dataset>,
) -> Result<(MlpModel, History)> {
    config.validate()?;
    check_compatible(model, data)?;
    if let Some(ev) = eval {
        check_compatible(model, ev)?;
    }
    let softened: Option<(Vec<Vec<f64>>, LossSpec)> = match distill {
        Some(d) => {
            d.loss.validate()?;
            if d.teacher_probs.len() != data.len() {
                return Err(Error::Shape(format!(
                    "{} teacher rows for {} training rows",
                    d.teacher_probs.len(),
                    data.len()
                )));
            }
            if d.teacher_probs.iter().any(|p| p.len() != model.classes()) {
                return Err(Error::Shape("teacher rows must have one entry per class".into()));
            }
            let t = d.teacher_probs.iter().map(|p| soften_probs(p, d.loss.temperature)).collect();
            Some((t, d.loss))
        }
        None => None,
    };
    let target_of = |i: usize| -> Target<'_> {
        match &softened {
            None => Target::Hard(data.labels()[i]),
            Some((soft, spec)) => Target::Mixed {
                label: data.labels()[i],
                soft: &soft[i],
                spec: *spec,
            },
        }
    };

    let mut model = model.clone();
    let mut opt = OptimizerState::new(config.optimizer, &model);
    let mut grads = Gradients::zeros_like(&model);
    let mut history = Vec::with_capacity(config.epochs);
    let n = data.len();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch + 1);
        let order = Stream::derived(config.seed, epoch as u64).permutation(n);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let cache = model.forward_cached(data.row(i));
                if argmax(cache.logits()) == data.labels()[i] {
                    correct += 1;
                }
                let (loss, dz) = loss_and_dlogits(cache.logits(), target_of(i));
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch: epoch + 1 });
                }
                loss_sum += loss;
                model.backprop(&cache, &dz, scale, &mut grads);
            }
            opt.step(&mut model, &grads, lr);
        }
        if !model.is_finite() {
            return Err(Error::Divergence { epoch: epoch + 1 });
        }
        let (test_loss, test_accuracy) = match eval {
            Some(ev) => {
                let (l, a) = eval_metrics(&model, ev);
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        history.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            test_loss,
            test_accuracy,
        });
    }
    Ok((model, history))
}

/// Fraction of rows the model classifies correctly.
pub fn accuracy(model: &MlpModel, data: &Dataset) -> f64 {
    eval_metrics(model, data).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::nn::Activation;

    #[test]
    fn schedule_lookup() {
        let s = vec![(1, 1.0), (5, 0.1), (9, 0.01)];
        assert_eq!(schedule_multiplier(&s, 1), 1.0);
        assert_eq!(schedule_multiplier(&s, 4), 1.0);
        assert_eq!(schedule_multiplier(&s, 5), 0.1);
        assert_eq!(schedule_multiplier(&s, 100), 0.01);
        assert_eq!(schedule_multiplier(&[(3, 0.5)], 2), 1.0);
        let mut cfg = TrainConfig::sgd(0.1, 3, 4, 0);
        cfg.lr_schedule = vec![(2, 0.5), (2, 0.1)];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_epochs_rejected_and_zero_lr_is_identity() {
        let data = gen_synthetic(40, 2, 2, 3.0, 0.0, 1).unwrap();
        let m = MlpModel::init(&[2, 4, 2], Activation::Relu, 1).unwrap();
        let mut cfg = TrainConfig::adam(0.0, 1, 8, 3);
        let (out, hist) = train(&m, &data, &cfg, None).unwrap();
        assert_eq!(out, m);
        assert_eq!(hist.len(), 1);
        cfg.epochs = 0;
        assert!(matches!(train(&m, &data, &cfg, None), Err(Error::Config(_))));
        let sgd = TrainConfig::sgd(0.0, 2, 8, 3);
        assert_eq!(train(&m, &data, &sgd, None).unwrap().0, m);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let data = gen_synthetic(40, 2, 2, 3.0, 0.0, 1).unwrap();
        let m = MlpModel::init(&[2, 4, 2], Activation::Relu, 1).unwrap();
        let cfg = TrainConfig::sgd(1e300, 3, 8, 3);
        assert!(matches!(train(&m, &data, &cfg, None), Err(Error::Divergence { epoch: 1 | 2 })));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let data = gen_synthetic(40, 3, 2, 3.0, 0.0, 1).unwrap();
        let m = MlpModel::init(&[2, 4, 2], Activation::Relu, 1).unwrap();
        assert!(matches!(
            train(&m, &data, &TrainConfig::sgd(0.1, 1, 8, 0), None),
            Err(Error::Shape(_))
        ));
    }
}
