//! Model-stealing attacks: extraction (ME), distillation (KD), fine-tuning (FT).

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::loss::LossSpec;
use crate::nn::train::{validate_schedule, Optimizer};
use crate::nn::{argmax, train, Activation, Distillation, MlpModel, TrainConfig};
use crate::oracle::{query_all, PredictionOracle};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StealAttack {
    Me,
    Kd,
    Ft,
}

impl std::str::FromStr for StealAttack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "me" => Ok(StealAttack::Me),
            "kd" => Ok(StealAttack::Kd),
            "ft" => Ok(StealAttack::Ft),
            other => Err(Error::Config(format!("unknown stealing attack {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealConfig {
    pub attack: StealAttack,
    /// Weight of the hard-label term (KD).
    pub lambda1: f64,
    /// Weight of the softened teacher term (KD).
    pub lambda2: f64,
    /// KD temperature τ.
    pub temperature: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Optimizer for ME and KD students. FT always uses plain SGD.
    pub optimizer: Optimizer,
    /// FT learning rates as `(epoch, lr)`: epochs 1-based and increasing, the
    /// first entry at epoch 1, rates strictly decreasing.
    pub ft_lr_schedule: Vec<(usize, f64)>,
    /// Share of the victim's training data held by the attacker.
    pub attacker_fraction: f64,
    pub seed: u64,
}

impl StealConfig {
    /// λ₁ = λ₂ = 0.5, τ = 1.5, attacker holds 40% of the training set.
    pub fn standard(attack: StealAttack, seed: u64) -> Self {
        Self {
            attack,
            lambda1: 0.5,
            lambda2: 0.5,
            temperature: 1.5,
            epochs: 200,
            learning_rate: 1e-3,
            batch_size: 32,
            optimizer: Optimizer::Adam,
            ft_lr_schedule: vec![(1, 0.05), (21, 0.01), (41, 0.002)],
            attacker_fraction: 0.4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if !(self.attacker_fraction > 0.0 && self.attacker_fraction <= 1.0) {
            return Err(Error::Config("attacker fraction must lie in (0, 1]".into()));
        }
        match self.attack {
            StealAttack::Kd => self.kd_loss().validate(),
            StealAttack::Ft => {
                let s = &self.ft_lr_schedule;
                if s.is_empty() {
                    return Err(Error::Config("fine-tuning needs a learning-rate schedule".into()));
                }
                if s[0].0 != 1 {
                    return Err(Error::Config("fine-tuning schedule must start at epoch 1".into()));
                }
                if s.windows(2).any(|w| w[1].1 >= w[0].1) {
                    return Err(Error::Config("fine-tuning learning rates must strictly decrease".into()));
                }
                validate_schedule(s)
            }
            StealAttack::Me => Ok(()),
        }
    }

    fn kd_loss(&self) -> LossSpec {
        LossSpec {
            hard_weight: self.lambda1,
            soft_weight: self.lambda2,
            temperature: self.temperature,
        }
    }

    fn student_train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_schedule: Vec::new(),
            seed: self.seed,
        }
    }

    fn expect(&self, attack: StealAttack) -> Result<()> {
        if self.attack != attack {
            return Err(Error::Config(format!("config is for {:?}, not {:?}", self.attack, attack)));
        }
        self.validate()
    }
}

/// The attacker's share of the victim's training data: `ceil(fraction · n)`
/// rows drawn without replacement.
pub fn attacker_subset(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config("attacker fraction must lie in (0, 1]".into()));
    }
    let k = ((fraction * data.len() as f64).ceil() as usize).clamp(1, data.len());
    let mut ids = Stream::new(seed).sample_indices(data.len(), k);
    ids.sort_unstable();
    data.subset(&ids)
}

/// Model extraction: a fresh student (initialized from `config.seed`) trained
/// with cross-entropy against the victim's full probability vectors.
pub fn steal_me(
    victim: &dyn PredictionOracle,
    queries: &[&[f64]],
    config: &StealConfig,
    student_dims: &[usize],
    activation: Activation,
) -> Result<MlpModel> {
    config.expect(StealAttack::Me)?;
    if queries.is_empty() {
        return Err(Error::Data("no query features".into()));
    }
    let teacher = query_all(victim, queries)?;
    let student = MlpModel::init(student_dims, activation, config.seed)?;
    // Labels here are the teacher's argmax; the soft-only objective never reads them.
    let pseudo: Vec<usize> = teacher.iter().map(|p| argmax(p)).collect();
    let data = Dataset::from_rows(queries, pseudo, student.classes())?;
    let distill = Distillation { teacher_probs: teacher, loss: LossSpec::soft_only() };
    Ok(train(&student, &data, &config.student_train_config(), Some(&distill))?.0)
}

/// Knowledge distillation: `λ₁·CE(student, y) + λ₂·CE(teacher^τ, student^τ)`
/// where `a^τ = softmax(a / τ)` and the teacher's logits are recovered as the
/// log of its returned probabilities.
pub fn steal_kd(
    victim: &dyn PredictionOracle,
    labeled: &Dataset,
    config: &StealConfig,
    student_dims: &[usize],
    activation: Activation,
) -> Result<MlpModel> {
    config.expect(StealAttack::Kd)?;
    let teacher = query_all(victim, &labeled.rows())?;
    let student = MlpModel::init(student_dims, activation, config.seed)?;
    let distill = Distillation { teacher_probs: teacher, loss: config.kd_loss() };
    Ok(train(&student, labeled, &config.student_train_config(), Some(&distill))?.0)
}

/// White-box fine-tuning of a copy of the victim on ground-truth labels, with
/// SGD following `config.ft_lr_schedule`.
pub fn steal_ft(victim: &MlpModel, labeled: &Dataset, config: &StealConfig) -> Result<MlpModel> {
    config.expect(StealAttack::Ft)?;
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        // the schedule entries are absolute rates
        learning_rate: 1.0,
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr_schedule: config.ft_lr_schedule.clone(),
        seed: config.seed,
    };
    Ok(train(victim, labeled, &cfg, None)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::oracle::{FnOracle, LocalOracle};

    fn small(attack: StealAttack) -> StealConfig {
        StealConfig { epochs: 5, batch_size: 8, ..StealConfig::standard(attack, 3) }
    }

    fn victim() -> (MlpModel, Dataset) {
        let data = gen_synthetic(48, 3, 2, 2.0, 0.0, 1).unwrap();
        let m = MlpModel::init(&[3, 8, 2], Activation::Relu, 1).unwrap();
        let (m, _) = train(&m, &data, &TrainConfig::adam(1e-2, 20, 16, 1), None).unwrap();
        (m, data)
    }

    #[test]
    fn zero_lr_me_student_is_its_initialization() {
        let (v, data) = victim();
        let oracle = LocalOracle::new(v);
        let cfg = StealConfig { epochs: 1, learning_rate: 0.0, ..small(StealAttack::Me) };
        let s = steal_me(&oracle, &data.rows(), &cfg, &[3, 6, 2], Activation::Tanh).unwrap();
        assert_eq!(s, MlpModel::init(&[3, 6, 2], Activation::Tanh, cfg.seed).unwrap());
        assert_eq!(oracle.query_count(), 48);
    }

    #[test]
    fn kd_limits() {
        let (v, data) = victim();
        let oracle = LocalOracle::new(v);
        // λ2 = 0 is plain supervised training
        let cfg = StealConfig { lambda1: 1.0, lambda2: 0.0, ..small(StealAttack::Kd) };
        let kd = steal_kd(&oracle, &data, &cfg, &[3, 6, 2], Activation::Relu).unwrap();
        let init = MlpModel::init(&[3, 6, 2], Activation::Relu, cfg.seed).unwrap();
        let tc = TrainConfig { optimizer: cfg.optimizer, ..TrainConfig::adam(cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.seed) };
        let plain = train(&init, &data, &tc, None).unwrap().0;
        assert_eq!(kd, plain);

        // λ1 = 0, τ = 1 is model extraction
        let cfg = StealConfig { lambda1: 0.0, lambda2: 1.0, temperature: 1.0, ..small(StealAttack::Kd) };
        let kd = steal_kd(&oracle, &data, &cfg, &[3, 6, 2], Activation::Relu).unwrap();
        let me_cfg = StealConfig { attack: StealAttack::Me, ..cfg.clone() };
        let me = steal_me(&oracle, &data.rows(), &me_cfg, &[3, 6, 2], Activation::Relu).unwrap();
        assert_eq!(kd, me);
    }

    #[test]
    fn ft_contracts() {
        let (v, data) = victim();
        let before = v.clone();
        let cfg = StealConfig { ft_lr_schedule: vec![(1, 0.0)], ..small(StealAttack::Ft) };
        assert_eq!(steal_ft(&v, &data, &cfg).unwrap(), v);
        let moved = steal_ft(&v, &data, &small(StealAttack::Ft)).unwrap();
        assert_ne!(moved, v);
        assert_eq!(v, before);
        let empty = StealConfig { ft_lr_schedule: vec![], ..small(StealAttack::Ft) };
        assert!(matches!(steal_ft(&v, &data, &empty), Err(Error::Config(_))));
        let rising = StealConfig { ft_lr_schedule: vec![(1, 0.01), (3, 0.1)], ..small(StealAttack::Ft) };
        assert!(steal_ft(&v, &data, &rising).is_err());
    }

    #[test]
    fn uniform_teacher_gives_flat_student() {
        let data = gen_synthetic(64, 2, 2, 3.0, 0.0, 9).unwrap();
        let oracle = FnOracle::new(|_: &[f64]| vec![0.5, 0.5]);
        let cfg = StealConfig { epochs: 200, learning_rate: 1e-2, ..small(StealAttack::Me) };
        let s = steal_me(&oracle, &data.rows(), &cfg, &[2, 8, 2], Activation::Relu).unwrap();
        let probs = s.forward_proba(&data.rows()).unwrap();
        let max = probs.iter().flat_map(|p| p.iter().copied()).fold(0.0, f64::max);
        assert!(max <= 0.6, "max prob {max}");
    }

    #[test]
    fn attacker_subset_size() {
        let data = gen_synthetic(200, 2, 2, 1.0, 0.0, 0).unwrap();
        assert_eq!(attacker_subset(&data, 0.4, 1).unwrap().len(), 80);
        assert!(attacker_subset(&data, 0.0, 1).is_err());
    }

    #[test]
    fn wrong_attack_config_rejected() {
        let (v, data) = victim();
        assert!(steal_ft(&v, &data, &small(StealAttack::Me)).is_err());
    }
}
