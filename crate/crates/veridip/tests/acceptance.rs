//! End-to-end acceptance checks. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use num_rational::Ratio;
use veridip::{PredictServer, RemoteConfig, RemoteOracle};
use veridip_core::accountant::{min_pvalue_bound, min_pvalue_bound_for, rdp_subsampled_gaussian, rdp_to_epsilon};
use veridip_core::data::gen_synthetic;
use veridip_core::mia::{advantage, advantage_counts, AttackTag, MiaConfig, ScoreSet};
use veridip_core::nn::{
    accuracy, batch_gradient, deserialize, dp_train, load_model, mean_loss, save_model, serialize, train, DpConfig,
    Optimizer, TrainConfig,
};
use veridip_core::oracle::sample_losses;
use veridip_core::rng::Stream;
use veridip_core::steal::{attacker_subset, steal_ft, steal_kd, steal_me, StealAttack, StealConfig};
use veridip_core::verify::{fingerprint_from_scores, p_value, PerSampleAttack};
use veridip_core::{
    build_farm, Activation, Attack, Dataset, LocalOracle, MlpModel, PredictionOracle, ShadowFarm, ShadowSpec, Verifier,
    VerifyMode,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        // a NaN comparison is false, so it fails the check
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = f();
        self.record(id, name, budget, start.elapsed(), result);
    }

    fn record(&mut self, id: u32, name: &str, budget: Option<Duration>, took: Duration, result: Outcome) {
        let result = match (result, budget) {
            (Ok(_), Some(b)) if took > b => Err(format!("took {:.1} s, budget {:.0} s", took.as_secs_f64(), b.as_secs_f64())),
            (r, _) => r,
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {id:>2} {name} ({:.2} s): {detail}", took.as_secs_f64());
    }
}

// --- shared benchmark -------------------------------------------------------

const DATA_SEED: u64 = 11;
const FARM_SEED: u64 = 5;

struct Bench {
    dims: Vec<usize>,
    members: Dataset,
    nonmembers: Dataset,
    test: Dataset,
    victim: MlpModel,
    copies: Vec<(&'static str, MlpModel)>,
    farm: ShadowFarm,
    train_cfg: TrainConfig,
}

impl Bench {
    fn build() -> Result<Self, String> {
        let all = ok(gen_synthetic(600, 10, 2, 2.0, 0.3, DATA_SEED))?;
        let ids: Vec<usize> = (0..600).collect();
        let members = ok(all.subset(&ids[..200]))?;
        let nonmembers = ok(all.subset(&ids[200..400]))?;
        let test = ok(all.subset(&ids[400..]))?;
        let dims = vec![10, 128, 2];
        let train_cfg = TrainConfig::adam(0.01, 300, 32, 1);
        let init = ok(MlpModel::init(&dims, Activation::Relu, 1))?;
        let (victim, _) = ok(train(&init, &members, &train_cfg, None))?;

        let attacker = ok(attacker_subset(&members, 0.4, 7))?;
        let oracle = LocalOracle::new(victim.clone());
        let student = |attack, seed| StealConfig { epochs: 600, learning_rate: 0.01, ..StealConfig::standard(attack, seed) };
        let me = ok(steal_me(&oracle, &attacker.rows(), &student(StealAttack::Me, 2), &dims, Activation::Relu))?;
        let kd = ok(steal_kd(&oracle, &attacker, &student(StealAttack::Kd, 3), &dims, Activation::Relu))?;
        let ft_cfg = StealConfig { epochs: 60, ..StealConfig::standard(StealAttack::Ft, 4) };
        let ft = ok(steal_ft(&victim, &attacker, &ft_cfg))?;

        let farm = Self::farm(&members, &nonmembers, &dims, &train_cfg, 32)?;
        Ok(Self {
            dims,
            members,
            nonmembers,
            test,
            victim,
            copies: vec![("me", me), ("kd", kd), ("ft", ft)],
            farm,
            train_cfg,
        })
    }

    fn farm(members: &Dataset, nonmembers: &Dataset, dims: &[usize], cfg: &TrainConfig, n: usize) -> Result<ShadowFarm, String> {
        let base = ok(members.concat(nonmembers))?;
        let spec = ShadowSpec { layer_dims: dims.to_vec(), activation: Activation::Relu, train: cfg.clone() };
        ok(ok(build_farm(&base, n, &spec, FARM_SEED))?.with_member_count(members.len()))
    }

    fn per_sample(&self) -> Result<Verifier<'_>, String> {
        let attack = ok(PerSampleAttack::from_farm(&self.farm, &MiaConfig::default()))?;
        ok(ok(Verifier::new(&self.members, &self.nonmembers, Attack::PerSample(attack)))?.with_farm(&self.farm))
    }

    fn global(&self) -> Result<Verifier<'_>, String> {
        let attack = ok(Attack::global(&MiaConfig::default()))?;
        ok(ok(Verifier::new(&self.members, &self.nonmembers, attack))?.with_farm(&self.farm))
    }
}

// --- criteria ---------------------------------------------------------------

fn gradients() -> Outcome {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for seed in 0..25u64 {
        let mut s = Stream::new(1000 + seed);
        let d = 2 + s.below(5) as usize;
        let k = 2 + s.below(4) as usize;
        let mut dims = vec![d, 2 + s.below(8) as usize];
        if seed % 3 == 0 {
            dims.push(2 + s.below(5) as usize);
        }
        dims.push(k);
        let act = if seed % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let mut m = ok(MlpModel::init(&dims, act, seed))?;
        // nonzero biases keep pre-activations off the ReLU kink
        m.biases_mut().iter_mut().flatten().for_each(|b| *b = 0.1 * s.normal());
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..d).map(|_| s.normal()).collect()).collect();
        let labels: Vec<usize> = (0..5).map(|_| s.below(k as u64) as usize).collect();
        let analytic = ok(batch_gradient(&m, &rows, &labels))?.to_flat();
        let mut sq_diff = 0.0;
        let mut sq_a = 0.0;
        let mut sq_n = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = m.clone();
            *plus.params_mut().nth(i).unwrap() += h;
            let mut minus = m.clone();
            *minus.params_mut().nth(i).unwrap() -= h;
            let n = (ok(mean_loss(&plus, &rows, &labels))? - ok(mean_loss(&minus, &rows, &labels))?) / (2.0 * h);
            sq_diff += (a - n) * (a - n);
            sq_a += a * a;
            sq_n += n * n;
        }
        let rel = sq_diff.sqrt() / (sq_a.sqrt() + sq_n.sqrt()).max(1e-12);
        ensure!(rel < 1e-5, "model {seed} ({dims:?}): relative error {rel:.2e}");
        worst = worst.max(rel);
    }
    Ok(format!("25 models, worst relative error {worst:.2e} (< 1e-5)"))
}

fn advantage_oracle() -> Outcome {
    let mut s = Stream::new(21);
    let mut cases = 0;
    for _ in 0..300 {
        let m = 1 + s.below(8) as usize;
        let n = 1 + s.below(8) as usize;
        let mi: Vec<i64> = (0..m).map(|_| s.below(5) as i64).collect();
        let ni: Vec<i64> = (0..n).map(|_| s.below(5) as i64).collect();
        let scores = ScoreSet::new(
            mi.iter().map(|&x| x as f64 / 4.0).collect(),
            ni.iter().map(|&x| x as f64 / 4.0).collect(),
            AttackTag::Global,
        );
        for t8 in -1..=9i64 {
            // enumerate the game: coin b, uniform sample from world b, guess = score > t
            let mut correct = Ratio::from_integer(0i64);
            for b in [true, false] {
                let world = if b { &mi } else { &ni };
                for &x in world.iter() {
                    let guess = 2 * x > t8;
                    if guess == b {
                        correct += Ratio::new(1, 2 * world.len() as i64);
                    }
                }
            }
            let exact = correct * 2 - 1;
            let t = t8 as f64 / 8.0;
            let c = ok(advantage_counts(&scores, t))?;
            let counted = Ratio::new(c.true_positives as i64, c.members as i64)
                - Ratio::new(c.false_positives as i64, c.nonmembers as i64);
            ensure!(counted == exact, "members {mi:?} non-members {ni:?} t={t}: {counted} vs {exact}");
            let got = ok(advantage(&scores, t))?;
            let want = *exact.numer() as f64 / *exact.denom() as f64;
            ensure!((got - want).abs() <= 4.0 * f64::EPSILON, "t={t}: advantage {got} vs {exact}");
            cases += 1;
        }
    }
    Ok(format!("{cases} (instance, threshold) cases agree exactly"))
}

fn permutation_agreement() -> Outcome {
    let mut s = Stream::new(33);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let shift = 0.03 * trial as f64;
        let a: Vec<f64> = (0..50).map(|_| shift + s.normal()).collect();
        let b: Vec<f64> = (0..50).map(|_| 0.5 * s.normal()).collect();
        let p = p_value(&ok(fingerprint_from_scores(&ScoreSet::new(a.clone(), b.clone(), AttackTag::Global)))?);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let observed = mean(&a) - mean(&b);
        let mut pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
        let mut rng = Stream::new(500 + trial);
        let mut hits = 0;
        for _ in 0..10_000 {
            rng.shuffle(&mut pooled);
            if mean(&pooled[..50]) - mean(&pooled[50..]) >= observed - 1e-12 {
                hits += 1;
            }
        }
        let perm = (hits + 1) as f64 / 10_001.0;
        ensure!((p - perm).abs() < 0.02, "trial {trial}: analytic {p:.4} vs permutation {perm:.4}");
        worst = worst.max((p - perm).abs());
    }
    Ok(format!("20 trials at n_S=50, worst |Δp| = {worst:.4} (< 0.02)"))
}

fn null_calibration(bench: &Bench) -> Outcome {
    let verifiers = [("per-sample", bench.per_sample()?), ("global", bench.global()?)];
    let mut lines = Vec::new();
    for (name, v) in &verifiers {
        let mut low = 0;
        let mut ps = Vec::new();
        for i in 0..10u64 {
            let data = ok(gen_synthetic(200, 10, 2, 2.0, 0.3, 100 + i))?;
            let init = ok(MlpModel::init(&bench.dims, Activation::Relu, 200 + i))?;
            let (model, _) = ok(train(&init, &data, &bench.train_cfg, None))?;
            let oracle = LocalOracle::new(model);
            for seed in 0..20 {
                let p = ok(v.ownership_test(&oracle, 100, 0.01, VerifyMode::Basic, seed))?.p_value;
                low += usize::from(p < 0.01);
                ps.push(p);
            }
        }
        let mean = ps.iter().sum::<f64>() / ps.len() as f64;
        ensure!(low * 20 <= ps.len(), "{name}: {low}/200 p-values below 0.01 (mean p {mean:.3})");
        lines.push(format!("{name} {low}/200 below 0.01, mean p {mean:.3}"));
    }
    Ok(lines.join("; "))
}

fn steal_and_verify(bench: &Bench) -> Outcome {
    let train_acc = accuracy(&bench.victim, &bench.members);
    let test_acc = accuracy(&bench.victim, &bench.test);
    ensure!(train_acc - test_acc >= 0.10, "victim gap only {:.1} points", 100.0 * (train_acc - test_acc));
    let v = bench.per_sample()?;
    let mut suspects = vec![("victim", &bench.victim)];
    suspects.extend(bench.copies.iter().map(|(n, m)| (*n, m)));
    let mut lines = vec![format!("victim train {:.2} / test {:.2}", train_acc, test_acc)];
    for (name, model) in suspects {
        let oracle = LocalOracle::new(model.clone());
        let mut hits = 0;
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            let verdict = ok(v.ownership_test(&oracle, 100, 0.01, VerifyMode::Basic, seed))?;
            hits += usize::from(verdict.stolen());
            worst = worst.max(verdict.p_value);
        }
        ensure!(hits >= 9, "{name}: Y=1 in only {hits}/10 seeds (largest p {worst:.2e})");
        lines.push(format!("{name} {hits}/10 (max p {worst:.1e})"));
    }
    Ok(lines.join(", "))
}

fn grid() -> Vec<usize> {
    [2, 3, 4, 5, 6, 8, 10, 12, 15].into_iter().chain((4..=20).map(|i| i * 5)).collect()
}

fn fmt_min(n: Option<usize>) -> String {
    n.map_or("none".into(), |n| n.to_string())
}

fn enhanced_dominance(bench: &Bench) -> Outcome {
    let rank = |n: Option<usize>| n.unwrap_or(usize::MAX);
    let oracle = LocalOracle::new(bench.victim.clone());
    let mut lines = Vec::new();
    let mut per_sample_enhanced = None;
    for (name, v) in [("global", bench.global()?), ("per-sample", bench.per_sample()?)] {
        let basic = ok(v.min_exposed_search(&oracle, 0.01, VerifyMode::Basic, &grid(), 5, 0))?.n_s;
        let enhanced = ok(v.min_exposed_search(&oracle, 0.01, VerifyMode::Enhanced, &grid(), 5, 0))?.n_s;
        ensure!(rank(enhanced) <= rank(basic), "{name}: enhanced {} > basic {}", fmt_min(enhanced), fmt_min(basic));
        if name == "per-sample" {
            per_sample_enhanced = enhanced;
        }
        lines.push(format!("{name} basic {} / enhanced {}", fmt_min(basic), fmt_min(enhanced)));
    }
    ensure!(
        per_sample_enhanced.is_some_and(|n| n <= 20),
        "enhanced per-sample needs {}",
        fmt_min(per_sample_enhanced)
    );
    Ok(format!("victim: {}", lines.join(", ")))
}

/// Not asserted: how the stolen copies fare under the same search.
fn copies_min_exposed(bench: &Bench) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (name, model) in &bench.copies {
        let oracle = LocalOracle::new(model.clone());
        let mut cells = Vec::new();
        for (attack, v) in [("global", bench.global()?), ("per-sample", bench.per_sample()?)] {
            for mode in [VerifyMode::Basic, VerifyMode::Enhanced] {
                let n = ok(v.min_exposed_search(&oracle, 0.01, mode, &grid(), 5, 0))?.n_s;
                cells.push(format!("{attack}/{mode} {}", fmt_min(n)));
            }
        }
        out.push(format!("{name}: {}", cells.join(", ")));
    }
    Ok(out)
}

fn eta_long_tail(bench: &Bench) -> Outcome {
    let farm = Bench::farm(&bench.members, &bench.nonmembers, &bench.dims, &bench.train_cfg, 100)?;
    let mut eta: Vec<f64> =
        farm.eta_scores().into_iter().filter(|e| e.sample_id < bench.members.len()).map(|e| e.eta).collect();
    eta.sort_by(f64::total_cmp);
    let n = eta.len();
    let median = if n % 2 == 1 { eta[n / 2] } else { 0.5 * (eta[n / 2 - 1] + eta[n / 2]) };
    let mean = eta.iter().sum::<f64>() / n as f64;
    let max = eta[n - 1];
    ensure!(mean > median, "mean {mean:.3} <= median {median:.3}");
    ensure!(max > 5.0 * median, "max {max:.3} <= 5 x median {median:.3}");
    Ok(format!("N=100, {n} members: mean {mean:.1}, median {median:.1}, max {max:.1}"))
}

fn dp_bound() -> Outcome {
    let sigma = 0.3287f64;
    let p = ok(min_pvalue_bound_for(0.1, 10, sigma * sigma))?;
    ensure!((p - 0.156).abs() <= 0.002, "bound at ε=0.1 is {p:.4}");
    let s = sigma / 2f64.sqrt();
    let same = ok(min_pvalue_bound(0.1, 10, s, s))?;
    ensure!((same - p).abs() < 1e-12, "split deviations give {same}");
    let zero = ok(min_pvalue_bound_for(0.0, 10, sigma * sigma))?;
    ensure!(zero == 0.5, "ε=0 gives {zero}");
    let mut prev = f64::INFINITY;
    for i in 0..100 {
        let eps = 0.02 * i as f64;
        let v = ok(min_pvalue_bound_for(eps, 10, sigma * sigma))?;
        ensure!(v <= prev, "not monotone at ε={eps}: {v} > {prev}");
        prev = v;
    }
    Ok(format!("p_min(ε=0.1) = {p:.4}, p_min(0) = 0.5, non-increasing over 100 ε values"))
}

fn dp_invariants(bench: &Bench) -> Outcome {
    let clip = 0.5;
    let cfg = DpConfig {
        clip_threshold: clip,
        noise_multiplier: 1.1,
        target_delta: 1e-5,
        epochs: 5,
        batch_size: 25,
        learning_rate: 0.1,
        optimizer: Optimizer::Sgd,
        seed: 3,
    };
    let init = ok(MlpModel::init(&bench.dims, Activation::Relu, 9))?;
    let out = ok(dp_train(&init, &bench.members, &cfg))?;
    ensure!(out.max_clipped_norm <= clip, "clipped norm {} exceeds C={clip}", out.max_clipped_norm);
    ensure!(out.max_clipped_norm > 0.0, "no gradient observed");

    let orders: Vec<f64> = (2..=64).map(f64::from).collect();
    for z in [0.8, 1.0, 3.0] {
        let prof = ok(rdp_subsampled_gaussian(1.0, z, 40, &orders))?;
        for (a, r) in orders.iter().zip(&prof.rdp_values) {
            ensure!(*r == 40.0 * a / (2.0 * z * z), "q=1, z={z}, α={a}: {r}");
        }
    }

    let steps = cfg.epochs * 8;
    let mut eps = Vec::new();
    for z in [1.0, 2.0, 4.0, 8.0] {
        eps.push(ok(rdp_to_epsilon(&ok(rdp_subsampled_gaussian(0.125, z, steps, &orders))?, 1e-5))?.0);
    }
    ensure!(eps.windows(2).all(|w| w[1] < w[0]), "ε not decreasing in z: {eps:?}");
    Ok(format!(
        "max clipped norm {:.4} <= {clip}; q=1 exact; ε over z=1,2,4,8: {}",
        out.max_clipped_norm,
        eps.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>().join(" > ")
    ))
}

fn query_count(bench: &Bench) -> Outcome {
    let server = ok(PredictServer::start(bench.victim.clone(), "127.0.0.1:0", 2))?;
    let remote = ok(RemoteOracle::new(&server.url(), RemoteConfig::default()))?;
    let verdict = ok(bench.per_sample()?.ownership_test(&remote, 10, 0.01, VerifyMode::Basic, 0))?;
    let (client, served) = (remote.query_count(), server.query_count());
    server.shutdown();
    ensure!(client == 20 && served == 20, "client counted {client}, server answered {served}");
    Ok(format!("20 queries (client and server), p = {:.2e}", verdict.p_value))
}

fn post(url: &str, body: &str) -> Result<(u16, serde_json::Value), String> {
    let (code, text) = match ureq::post(&format!("{url}/predict")).set("Content-Type", "application/json").send_string(body) {
        Ok(r) => (r.status(), ok(r.into_string())?),
        Err(ureq::Error::Status(code, r)) => (code, ok(r.into_string())?),
        Err(e) => return Err(e.to_string()),
    };
    Ok((code, ok(serde_json::from_str(&text))?))
}

fn serialization(bench: &Bench) -> Outcome {
    for model in std::iter::once(&bench.victim).chain(bench.copies.iter().map(|(_, m)| m)) {
        let bytes = serialize(model);
        let back = ok(deserialize(&bytes))?;
        ensure!(serialize(&back) == bytes, "re-serialized bytes differ");
        ensure!(model.params().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits()), "parameters differ");
    }
    let dir = ok(tempfile::tempdir())?;
    let path = dir.path().join("victim.vdip");
    ok(save_model(&bench.victim, &path))?;
    ensure!(serialize(&ok(load_model(&path))?) == serialize(&bench.victim), "file round trip differs");

    let server = ok(PredictServer::start(bench.victim.clone(), "127.0.0.1:0", 2))?;
    let url = server.url();
    let remote = ok(RemoteOracle::new(&url, RemoteConfig::default()))?;
    let pool = ok(bench.members.concat(&bench.nonmembers))?;
    let local = ok(sample_losses(&LocalOracle::new(bench.victim.clone()), &pool))?;
    let over_http = ok(sample_losses(&remote, &pool))?;
    let worst = local.iter().zip(&over_http).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(worst <= 1e-9, "loop-back loss differs by {worst:e}");

    let (code, body) = post(&url, r#"{"features": [[1.0, 2.0]]}"#)?;
    let msg = body["error"].as_str().unwrap_or_default().to_string();
    ensure!(code == 400 && msg.contains("expected width 10"), "width mismatch gave {code} {body}");
    for bad in ["{", r#"{"rows": []}"#, r#"{"features": "x"}"#] {
        let (code, body) = post(&url, bad)?;
        ensure!(code == 400 && body["error"].is_string(), "{bad:?} gave {code} {body}");
    }
    server.shutdown();
    Ok(format!("bit-exact round trips; {} loop-back losses within {worst:.1e}; malformed requests get 400", pool.len()))
}

fn main() {
    let mut report = Report { failures: 0 };
    report.run(1, "gradient correctness", Some(Duration::from_secs(10)), gradients);
    report.run(2, "advantage oracle equivalence", Some(Duration::from_secs(1)), advantage_oracle);
    report.run(3, "p-value vs permutation test", Some(Duration::from_secs(30)), permutation_agreement);

    let started = Instant::now();
    let bench = Bench::build();
    let build_time = started.elapsed();
    match bench {
        Err(e) => {
            for (id, name) in [
                (4, "null calibration"),
                (5, "steal and verify"),
                (6, "enhanced dominance"),
                (7, "eta long tail"),
                (9, "dp-sgd invariants"),
                (10, "query efficiency"),
                (11, "serialization and protocol"),
            ] {
                report.record(id, name, None, Duration::ZERO, Err(format!("benchmark setup failed: {e}")));
            }
            report.run(8, "dp bound", Some(Duration::from_secs(1)), dp_bound);
        }
        Ok(bench) => {
            report.run(4, "null calibration", None, || null_calibration(&bench));
            let started = Instant::now();
            let result = steal_and_verify(&bench);
            report.record(5, "steal and verify", Some(Duration::from_secs(600)), build_time + started.elapsed(), result);
            report.run(6, "enhanced dominance", None, || enhanced_dominance(&bench));
            match copies_min_exposed(&bench) {
                Ok(lines) => lines.iter().for_each(|l| println!("[INFO]  6 copies {l}")),
                Err(e) => println!("[INFO]  6 copies: {e}"),
            }
            report.run(7, "eta long tail", None, || eta_long_tail(&bench));
            report.run(8, "dp bound", Some(Duration::from_secs(1)), dp_bound);
            report.run(9, "dp-sgd invariants", Some(Duration::from_secs(60)), || dp_invariants(&bench));
            report.run(10, "query efficiency", None, || query_count(&bench));
            report.run(11, "serialization and protocol", None, || serialization(&bench));
        }
    }
    println!("{} criteria failed", report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
