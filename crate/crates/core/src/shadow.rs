//! Shadow models on random half-splits of a reference dataset.
//!
//! The farm backs two things: per-sample loss-gap scores η (used to pick the
//! least private training samples) and per-sample in/out Gaussian fits of
//! the logit confidence (used by the likelihood-ratio attack).
//!
//! Models come in complementary pairs: model `2i` trains on a random half `H`
//! of the rows and model `2i + 1` on the rest, so every sample is inside
//! exactly half of the models (an odd last model gets its own random half).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mia::{fit_gauss_pair, logit_confidence_from_loss, GaussPair};
use crate::nn::loss::nll;
use crate::nn::{load_model, save_model, train, Activation, MlpModel, TrainConfig};
use crate::rng::{derive_seed, Stream};

pub const MIN_SHADOWS: usize = 8;
pub const DEFAULT_SHADOWS: usize = 100;
/// Denominator floor in η.
pub const LOSS_FLOOR: f64 = 1e-8;

/// Architecture and training recipe shared by every shadow model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
}

impl ShadowSpec {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable spec");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone)]
pub struct ShadowFarm {
    models: Vec<MlpModel>,
    mask: Vec<Vec<bool>>,
    /// `losses[i][j]`: cross-entropy of model `i` on sample `j`.
    losses: Vec<Vec<f64>>,
    base: Dataset,
    spec: ShadowSpec,
    seed: u64,
    member_count: Option<usize>,
}

fn membership_masks(n: usize, n_models: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut mask = Vec::with_capacity(n_models);
    for pair in 0..n_models.div_ceil(2) {
        let half = Stream::derived(seed, pair as u64).sample_indices(n, n / 2);
        let mut row = vec![false; n];
        for j in half {
            row[j] = true;
        }
        let complement: Vec<bool> = row.iter().map(|b| !b).collect();
        mask.push(row);
        if mask.len() < n_models {
            mask.push(complement);
        }
    }
    mask
}

fn check_coverage(mask: &[Vec<bool>], n: usize) -> Result<()> {
    for j in 0..n {
        let in_count = mask.iter().filter(|row| row[j]).count();
        let out_count = mask.len() - in_count;
        if in_count < 2 || out_count < 2 {
            return Err(Error::Coverage { sample: j, in_count, out_count });
        }
    }
    Ok(())
}

fn loss_row(model: &MlpModel, data: &Dataset) -> Vec<f64> {
    let rows = data.rows();
    model
        .forward_proba(&rows)
        .expect("farm data matches model")
        .iter()
        .zip(data.labels())
        .map(|(p, &y)| nll(p[y]))
        .collect()
}

/// Trains `n_models` shadow models. Model `i` is initialized from
/// `derive_seed(seed, i)` and trained with `spec.train` re-seeded to
/// `derive_seed(spec.train.seed, i)`. Training runs in parallel; results are
/// assembled in index order.
pub fn build_farm(data: &Dataset, n_models: usize, spec: &ShadowSpec, seed: u64) -> Result<ShadowFarm> {
    if n_models < MIN_SHADOWS {
        return Err(Error::Config(format!("need at least {MIN_SHADOWS} shadow models, got {n_models}")));
    }
    spec.train.validate()?;
    let n = data.len();
    let mask = membership_masks(n, n_models, derive_seed(seed, u64::MAX));
    check_coverage(&mask, n)?;
    let models: Vec<MlpModel> = mask
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let ids: Vec<usize> = (0..n).filter(|&j| row[j]).collect();
            let subset = data.subset(&ids)?;
            let init = MlpModel::init(&spec.layer_dims, spec.activation, derive_seed(seed, i as u64))?;
            let cfg = TrainConfig { seed: derive_seed(spec.train.seed, i as u64), ..spec.train.clone() };
            Ok(train(&init, &subset, &cfg, None)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(ShadowFarm::assemble(models, mask, data.clone(), spec.clone(), seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaScore {
    pub sample_id: usize,
    pub eta: f64,
    pub mean_loss_in: f64,
    pub mean_loss_out: f64,
}

/// `η = mean_loss_out / max(mean_loss_in, LOSS_FLOOR)`.
pub fn eta_from_means(mean_loss_out: f64, mean_loss_in: f64) -> f64 {
    mean_loss_out / mean_loss_in.max(LOSS_FLOOR)
}

fn sort_eta(list: &mut [EtaScore]) {
    list.sort_by(|a, b| b.eta.total_cmp(&a.eta).then(a.sample_id.cmp(&b.sample_id)));
}

/// The `k` highest-η sample ids, ties broken by ascending id.
pub fn select_less_private(eta_list: &[EtaScore], k: usize) -> Result<Vec<usize>> {
    if k > eta_list.len() {
        return Err(Error::Domain(format!("asked for {k} samples out of {}", eta_list.len())));
    }
    let mut sorted = eta_list.to_vec();
    sort_eta(&mut sorted);
    Ok(sorted[..k].iter().map(|e| e.sample_id).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n_models: usize,
    n_samples: usize,
    seed: u64,
    config_hash: String,
    /// Row-major N×n bitset, most significant bit first within each byte.
    mask: String,
    member_count: Option<usize>,
    spec: ShadowSpec,
}

fn encode_mask(mask: &[Vec<bool>]) -> String {
    let bits: Vec<bool> = mask.iter().flatten().copied().collect();
    let bytes: Vec<u8> = bits
        .chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i))))
        .collect();
    hex::encode(bytes)
}

fn decode_mask(hex_str: &str, n_models: usize, n: usize) -> Result<Vec<Vec<bool>>> {
    let bytes = hex::decode(hex_str).map_err(|e| Error::Data(format!("bad mask hex: {e}")))?;
    if bytes.len() != (n_models * n).div_ceil(8) {
        return Err(Error::Data("mask length does not match farm size".into()));
    }
    let bit = |b: usize| bytes[b / 8] >> (7 - b % 8) & 1 == 1;
    Ok((0..n_models).map(|i| (0..n).map(|j| bit(i * n + j)).collect()).collect())
}

impl ShadowFarm {
    fn assemble(models: Vec<MlpModel>, mask: Vec<Vec<bool>>, base: Dataset, spec: ShadowSpec, seed: u64) -> Self {
        let losses = models.par_iter().map(|m| loss_row(m, &base)).collect();
        Self { models, mask, losses, base, spec, seed, member_count: None }
    }

    /// Records that the first `count` base rows are the protected training set.
    pub fn with_member_count(mut self, count: usize) -> Result<Self> {
        if count > self.base.len() {
            return Err(Error::Config(format!("member count {count} exceeds {} farm samples", self.base.len())));
        }
        self.member_count = Some(count);
        Ok(self)
    }

    pub fn member_count(&self) -> Option<usize> {
        self.member_count
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.base.len()
    }

    pub fn models(&self) -> &[MlpModel] {
        &self.models
    }

    pub fn mask(&self) -> &[Vec<bool>] {
        &self.mask
    }

    pub fn losses(&self) -> &[Vec<f64>] {
        &self.losses
    }

    pub fn base(&self) -> &Dataset {
        &self.base
    }

    pub fn spec(&self) -> &ShadowSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn split_losses(&self, sample: usize, skip_model: Option<usize>) -> (Vec<f64>, Vec<f64>) {
        let mut inside = Vec::new();
        let mut outside = Vec::new();
        for (i, row) in self.mask.iter().enumerate() {
            if Some(i) == skip_model {
                continue;
            }
            if row[sample] {
                inside.push(self.losses[i][sample]);
            } else {
                outside.push(self.losses[i][sample]);
            }
        }
        (inside, outside)
    }

    /// η for every sample, sorted by descending η (ties by ascending id).
    pub fn eta_scores(&self) -> Vec<EtaScore> {
        let mut out: Vec<EtaScore> = (0..self.n_samples())
            .map(|j| {
                let (inside, outside) = self.split_losses(j, None);
                let mean_loss_in = crate::stats::mean(&inside);
                let mean_loss_out = crate::stats::mean(&outside);
                EtaScore { sample_id: j, eta: eta_from_means(mean_loss_out, mean_loss_in), mean_loss_in, mean_loss_out }
            })
            .collect();
        sort_eta(&mut out);
        out
    }

    /// Logit-confidence Gaussian fits for `sample`, optionally leaving one model out.
    pub fn gauss_pair(&self, sample: usize, skip_model: Option<usize>, clamp: f64, sigma_floor: f64) -> Result<GaussPair> {
        let (inside, outside) = self.split_losses(sample, skip_model);
        let to_logit = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|l| logit_confidence_from_loss(l, clamp)).collect() };
        fit_gauss_pair(&to_logit(inside), &to_logit(outside), sigma_floor)
    }

    pub fn gauss_pairs(&self, clamp: f64, sigma_floor: f64) -> Result<Vec<GaussPair>> {
        (0..self.n_samples()).map(|j| self.gauss_pair(j, None, clamp, sigma_floor)).collect()
    }

    /// Writes `manifest.json`, `base.csv` and one `shadow_NNNN.vdip` per model.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            n_models: self.len(),
            n_samples: self.n_samples(),
            seed: self.seed,
            config_hash: self.spec.hash(),
            mask: encode_mask(&self.mask),
            member_count: self.member_count,
            spec: self.spec.clone(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        self.base.save_csv(dir.join("base.csv"))?;
        for (i, m) in self.models.iter().enumerate() {
            save_model(m, dir.join(format!("shadow_{i:04}.vdip")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if manifest.spec.hash() != manifest.config_hash {
            return Err(Error::Data("farm manifest config hash mismatch".into()));
        }
        let base = Dataset::load_csv(dir.join("base.csv"), "label")?;
        let classes = *manifest.spec.layer_dims.last().unwrap_or(&2);
        let base = base.with_classes(classes)?;
        if base.len() != manifest.n_samples {
            return Err(Error::Data("farm base data size differs from manifest".into()));
        }
        let mask = decode_mask(&manifest.mask, manifest.n_models, manifest.n_samples)?;
        let models = (0..manifest.n_models)
            .map(|i| load_model(dir.join(format!("shadow_{i:04}.vdip"))))
            .collect::<Result<Vec<_>>>()?;
        let farm = Self::assemble(models, mask, base, manifest.spec, manifest.seed);
        match manifest.member_count {
            Some(c) => farm.with_member_count(c),
            None => Ok(farm),
        }
    }
}
