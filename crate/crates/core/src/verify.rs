//! Ownership testing: fingerprint estimation, the one-sided p-value, and
//! the basic and enhanced verification procedures.
//!
//! A fingerprint is the mean attack score on exposed training samples (D0)
//! minus the mean on fresh non-members (D1). Under the null hypothesis that
//! the suspect never saw D0, the difference is centred at zero and
//! approximately normal with variance `(σ0² + σ1²) / n_S`.

use serde::{Deserialize, Serialize};

use crate::data::{sample_pair, Dataset, SamplePair};
use crate::error::{Error, Result};
use crate::mia::{
    calibrate_threshold, global_score_from_loss, lira_log_score, logit_confidence_from_loss, AttackTag,
    GaussPair, MiaConfig, ScoreSet,
};
use crate::oracle::{sample_losses, PredictionOracle};
use crate::rng::{derive_seed, Stream};
use crate::shadow::ShadowFarm;
use crate::stats::{mean, median, normal_sf, sample_std};

/// Floor applied to `σ0² + σ1²` when both groups are constant.
pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const MIN_PERMUTATIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifyMode {
    Basic,
    Enhanced,
}

impl std::fmt::Display for VerifyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VerifyMode::Basic => "basic",
            VerifyMode::Enhanced => "enhanced",
        })
    }
}

impl std::str::FromStr for VerifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(VerifyMode::Basic),
            "enhanced" => Ok(VerifyMode::Enhanced),
            other => Err(Error::Config(format!("unknown verification mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub f_star: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub n_s: usize,
    pub attack: AttackTag,
}

/// Fingerprint from already computed scores (members first).
pub fn fingerprint_from_scores(scores: &ScoreSet) -> Result<Fingerprint> {
    let n_s = scores.member_scores.len();
    if n_s != scores.nonmember_scores.len() {
        return Err(Error::Domain(format!(
            "group sizes differ: {} members, {} non-members",
            n_s,
            scores.nonmember_scores.len()
        )));
    }
    if n_s < 2 {
        return Err(Error::Domain(format!("n_S must be at least 2, got {n_s}")));
    }
    Ok(Fingerprint {
        f_star: mean(&scores.member_scores) - mean(&scores.nonmember_scores),
        sigma0: sample_std(&scores.member_scores),
        sigma1: sample_std(&scores.nonmember_scores),
        n_s,
        attack: scores.attack,
    })
}

/// `P = 1 - Φ(F* · sqrt(n_S) / sqrt(σ0² + σ1²))`, plus whether the variance
/// floor was applied. The result is kept inside `(0, 1)`.
pub fn p_value_checked(fp: &Fingerprint) -> (f64, bool) {
    let var = fp.sigma0 * fp.sigma0 + fp.sigma1 * fp.sigma1;
    let floored = !(var >= VARIANCE_FLOOR);
    let var = if floored { VARIANCE_FLOOR } else { var };
    let z = fp.f_star * (fp.n_s as f64).sqrt() / var.sqrt();
    let p = normal_sf(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    (p, floored)
}

pub fn p_value(fp: &Fingerprint) -> f64 {
    p_value_checked(fp).0
}

/// Likelihood-ratio attack backed by a shadow farm built over
/// `members ++ nonmembers`. Scores are the indicator `ln Λ > t`, with one
/// global threshold `t` calibrated on the farm itself: each shadow model in
/// turn plays the target, scored against fits from the remaining models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSampleAttack {
    pub pairs: Vec<GaussPair>,
    pub log_threshold: f64,
    /// TPR - FPR of the threshold on the calibration scores.
    pub calibration_advantage: f64,
    pub logit_clamp: f64,
    pub member_count: usize,
}

impl PerSampleAttack {
    pub fn from_farm(farm: &ShadowFarm, cfg: &MiaConfig) -> Result<Self> {
        cfg.validate()?;
        let member_count = farm
            .member_count()
            .ok_or_else(|| Error::Config("farm does not record which samples are members".into()))?;
        let pairs = farm.gauss_pairs(cfg.logit_clamp, cfg.sigma_floor)?;
        let mut inside = Vec::new();
        let mut outside = Vec::new();
        for (t, row) in farm.mask().iter().enumerate() {
            for (j, &is_in) in row.iter().enumerate() {
                let pair = match farm.gauss_pair(j, Some(t), cfg.logit_clamp, cfg.sigma_floor) {
                    Ok(p) => p,
                    Err(Error::InsufficientShadows(_)) => continue,
                    Err(e) => return Err(e),
                };
                let phi = logit_confidence_from_loss(farm.losses()[t][j], cfg.logit_clamp);
                let s = lira_log_score(phi, &pair);
                if is_in {
                    inside.push(s);
                } else {
                    outside.push(s);
                }
            }
        }
        let cal = calibrate_threshold(&ScoreSet::new(inside, outside, AttackTag::PerSample))?;
        Ok(Self {
            pairs,
            log_threshold: cal.threshold,
            calibration_advantage: cal.advantage,
            logit_clamp: cfg.logit_clamp,
            member_count,
        })
    }

    fn indicator(&self, loss: f64, farm_id: usize) -> f64 {
        let phi = logit_confidence_from_loss(loss, self.logit_clamp);
        if lira_log_score(phi, &self.pairs[farm_id]) > self.log_threshold {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Attack {
    /// Loss-threshold attack in expectation: score `1 - min(ℓ, B) / B`.
    Global { loss_bound: f64 },
    PerSample(PerSampleAttack),
}

impl Attack {
    pub fn global(cfg: &MiaConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Attack::Global { loss_bound: cfg.loss_bound })
    }

    pub fn tag(&self) -> AttackTag {
        match self {
            Attack::Global { .. } => AttackTag::Global,
            Attack::PerSample(_) => AttackTag::PerSample,
        }
    }

    /// Scores D0 and D1, one oracle query per sample.
    pub fn scores(&self, oracle: &dyn PredictionOracle, pair: &SamplePair) -> Result<ScoreSet> {
        let member_losses = sample_losses(oracle, &pair.members)?;
        let nonmember_losses = sample_losses(oracle, &pair.nonmembers)?;
        let (members, nonmembers) = match self {
            Attack::Global { loss_bound } => {
                let score = |l: &f64| global_score_from_loss(*l, *loss_bound);
                (member_losses.iter().map(score).collect(), nonmember_losses.iter().map(score).collect())
            }
            Attack::PerSample(a) => (
                member_losses.iter().zip(&pair.member_ids).map(|(&l, &i)| a.indicator(l, i)).collect(),
                nonmember_losses
                    .iter()
                    .zip(&pair.nonmember_ids)
                    .map(|(&l, &j)| a.indicator(l, a.member_count + j))
                    .collect(),
            ),
        };
        Ok(ScoreSet::new(members, nonmembers, self.tag()))
    }
}

pub fn estimate_fingerprint(oracle: &dyn PredictionOracle, pair: &SamplePair, attack: &Attack) -> Result<Fingerprint> {
    if pair.members.len() < 2 || pair.members.len() != pair.nonmembers.len() {
        return Err(Error::Domain(format!(
            "need |D0| = |D1| >= 2, got {} and {}",
            pair.members.len(),
            pair.nonmembers.len()
        )));
    }
    fingerprint_from_scores(&attack.scores(oracle, pair)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub p_value: f64,
    pub outcome: u8,
    pub alpha: f64,
    pub n_s: usize,
    pub f_star: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub mode: VerifyMode,
    pub attack: AttackTag,
    pub exposed_sample_ids: Vec<usize>,
    pub variance_floored: bool,
}

impl Verdict {
    pub fn stolen(&self) -> bool {
        self.outcome == 1
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            f_star: self.f_star,
            sigma0: self.sigma0,
            sigma1: self.sigma1,
            n_s: self.n_s,
            attack: self.attack,
        }
    }
}

/// Member and non-member pools plus the attack used to test suspects.
#[derive(Debug, Clone)]
pub struct Verifier<'a> {
    members: &'a Dataset,
    nonmembers: &'a Dataset,
    attack: Attack,
    /// Member ids by descending η, present when a farm was attached.
    ranking: Option<Vec<usize>>,
}

impl<'a> Verifier<'a> {
    pub fn new(members: &'a Dataset, nonmembers: &'a Dataset, attack: Attack) -> Result<Self> {
        if members.dim() != nonmembers.dim() || members.classes() != nonmembers.classes() {
            return Err(Error::Config("member and non-member pools have different shapes".into()));
        }
        if let Attack::PerSample(a) = &attack {
            if a.member_count != members.len() || a.pairs.len() != members.len() + nonmembers.len() {
                return Err(Error::Config(format!(
                    "per-sample attack covers {} samples ({} members), pools hold {} + {}",
                    a.pairs.len(),
                    a.member_count,
                    members.len(),
                    nonmembers.len()
                )));
            }
        }
        Ok(Self { members, nonmembers, attack, ranking: None })
    }

    /// Attaches the farm's η ranking of the member pool, enabling enhanced mode.
    pub fn with_farm(mut self, farm: &ShadowFarm) -> Result<Self> {
        let m = self.members.len();
        if farm.member_count() != Some(m) || farm.n_samples() != m + self.nonmembers.len() {
            return Err(Error::Config(format!(
                "farm covers {} samples with member count {:?}; pools hold {} + {}",
                farm.n_samples(),
                farm.member_count(),
                m,
                self.nonmembers.len()
            )));
        }
        let base = farm.base();
        let same = |pool: &Dataset, offset: usize| {
            (0..pool.len()).all(|i| pool.row(i) == base.row(offset + i) && pool.labels()[i] == base.labels()[offset + i])
        };
        if base.dim() != self.members.dim() || !same(self.members, 0) || !same(self.nonmembers, m) {
            return Err(Error::Config("farm data differs from the member/non-member pools".into()));
        }
        self.ranking = Some(farm.eta_scores().into_iter().map(|e| e.sample_id).filter(|&id| id < m).collect());
        Ok(self)
    }

    pub fn attack(&self) -> &Attack {
        &self.attack
    }

    /// Member ids ordered from least to most private, if a farm is attached.
    pub fn ranking(&self) -> Option<&[usize]> {
        self.ranking.as_deref()
    }

    /// One ownership test. Basic mode draws D0 at random from the members;
    /// enhanced mode uses the `n_s` highest-η members. D1 is always a random
    /// draw from the non-member pool.
    pub fn ownership_test(
        &self,
        oracle: &dyn PredictionOracle,
        n_s: usize,
        alpha: f64,
        mode: VerifyMode,
        seed: u64,
    ) -> Result<Verdict> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if n_s < 2 {
            return Err(Error::Domain(format!("n_S must be at least 2, got {n_s}")));
        }
        let fixed = match mode {
            VerifyMode::Basic => None,
            VerifyMode::Enhanced => {
                let ranking = self
                    .ranking
                    .as_ref()
                    .ok_or_else(|| Error::Config("enhanced mode needs a shadow farm".into()))?;
                if ranking.len() < n_s {
                    return Err(Error::SampleSize { requested: n_s, available: ranking.len() });
                }
                Some(&ranking[..n_s])
            }
        };
        let pair = sample_pair(self.members, self.nonmembers, n_s, seed, fixed)?;
        let fp = estimate_fingerprint(oracle, &pair, &self.attack)?;
        let (p, variance_floored) = p_value_checked(&fp);
        Ok(Verdict {
            p_value: p,
            outcome: u8::from(p < alpha),
            alpha,
            n_s,
            f_star: fp.f_star,
            sigma0: fp.sigma0,
            sigma1: fp.sigma1,
            mode,
            attack: fp.attack,
            exposed_sample_ids: pair.member_ids,
            variance_floored,
        })
    }

    /// Smallest grid size whose median p-value over `repeats` tests falls
    /// below `alpha`. Repeat `r` uses seed `derive_seed(seed, r)`.
    pub fn min_exposed_search(
        &self,
        oracle: &dyn PredictionOracle,
        alpha: f64,
        mode: VerifyMode,
        grid: &[usize],
        repeats: usize,
        seed: u64,
    ) -> Result<MinExposed> {
        if grid.is_empty() || grid[0] == 0 || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("n_S grid must be ascending positive integers".into()));
        }
        if repeats == 0 {
            return Err(Error::Config("need at least one repeat".into()));
        }
        let mut evaluated = Vec::new();
        for &n in grid {
            let ps = (0..repeats)
                .map(|r| Ok(self.ownership_test(oracle, n, alpha, mode, derive_seed(seed, r as u64))?.p_value))
                .collect::<Result<Vec<_>>>()?;
            let med = median(&ps);
            evaluated.push((n, med));
            if med < alpha {
                return Ok(MinExposed { n_s: Some(n), evaluated });
            }
        }
        Ok(MinExposed { n_s: None, evaluated })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinExposed {
    /// `None` when no grid size certified the suspect.
    pub n_s: Option<usize>,
    /// `(n_S, median p)` for every grid point tried.
    pub evaluated: Vec<(usize, f64)>,
}

/// One-sided permutation test of the mean difference, smoothed as
/// `(hits + 1) / (permutations + 1)`.
pub fn permutation_pvalue(member_scores: &[f64], nonmember_scores: &[f64], permutations: usize, seed: u64) -> Result<f64> {
    if member_scores.is_empty() || nonmember_scores.is_empty() {
        return Err(Error::Domain("permutation test needs two non-empty groups".into()));
    }
    if permutations < MIN_PERMUTATIONS {
        return Err(Error::Domain(format!("need at least {MIN_PERMUTATIONS} permutations, got {permutations}")));
    }
    let m = member_scores.len();
    let observed = mean(member_scores) - mean(nonmember_scores);
    let mut pooled: Vec<f64> = member_scores.iter().chain(nonmember_scores).copied().collect();
    // summation order changes between permutations; allow for rounding
    let tol = 1e-12 * (1.0 + observed.abs());
    let mut stream = Stream::new(seed);
    let mut hits = 0usize;
    for _ in 0..permutations {
        stream.shuffle(&mut pooled);
        let diff = mean(&pooled[..m]) - mean(&pooled[m..]);
        if diff >= observed - tol {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (permutations + 1) as f64)
}
