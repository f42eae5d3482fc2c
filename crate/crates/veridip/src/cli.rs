//! `veridip` command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use veridip_core::accountant::{bound_curve, write_bound_csv};
use veridip_core::data::{gen_synthetic, split, SplitSpec};
use veridip_core::mia::{AttackTag, MiaConfig};
use veridip_core::nn::{
    accuracy, dp_train, load_model, save_model, train_with_eval, Activation, DpConfig, MlpModel, Optimizer,
    TrainConfig,
};
use veridip_core::oracle::{LocalOracle, PredictionOracle};
use veridip_core::shadow::{build_farm, ShadowFarm, ShadowSpec};
use veridip_core::steal::{attacker_subset, steal_ft, steal_kd, steal_me, StealAttack, StealConfig};
use veridip_core::verify::{Attack, PerSampleAttack, Verifier, VerifyMode};
use veridip_core::{Dataset, Error};

use crate::manifest::{manifest_path_for, ManifestBuilder};
use crate::remote::{RemoteConfig, RemoteOracle};
use crate::server::PredictServer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_NOT_STOLEN: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "veridip", version, about = "Model ownership verification from privacy-leakage fingerprints")]
struct Cli {
    /// TOML file with default option values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the run manifest (default: `<out>.manifest.json`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-mixture dataset.
    GenData(GenDataArgs),
    /// Train a classifier.
    Train(TrainArgs),
    /// Train a classifier with DP-SGD and report the privacy spent.
    DpTrain(DpTrainArgs),
    /// Produce a stolen copy of a victim model.
    Steal(StealArgs),
    /// Train shadow models over the member and non-member pools.
    ShadowFarm(ShadowFarmArgs),
    /// Rank training samples by how much a model leaks about them.
    FindSensitive(FindSensitiveArgs),
    /// Run one ownership test against a suspect model.
    Verify(VerifyArgs),
    /// Find the fewest exposed samples that certify a suspect.
    MinNs(MinNsArgs),
    /// Tabulate the lower bound on p-values for differentially private models.
    DpBound(DpBoundArgs),
    /// Serve a model over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2.0)]
    separation: f64,
    /// Fraction of labels flipped to another class.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `<stem>.train.csv`, `<stem>.test.csv` and `<stem>.holdout.csv`
    /// using these three fractions.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "128")]
    hidden: Vec<usize>,
    #[arg(long, default_value = "relu")]
    activation: String,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Learning-rate multipliers as `epoch:factor,...`.
    #[arg(long)]
    lr_schedule: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_col: String,
    /// Evaluation set reported per epoch.
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct DpTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_col: String,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_multiplier: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value = "sgd")]
    optimizer: String,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct OracleArgs {
    /// Maximum number of sample queries sent to the suspect.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 3)]
    retries: u32,
    #[arg(long, default_value_t = 64)]
    query_batch: usize,
}

#[derive(Debug, Args, Serialize)]
struct StealArgs {
    #[arg(long)]
    attack: String,
    /// Victim model file, or base URL of a prediction server (me, kd).
    #[arg(long)]
    victim: String,
    /// The victim's training data; the attacker holds `--fraction` of it.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_col: String,
    #[arg(long, default_value_t = 0.4)]
    fraction: f64,
    /// Student hidden widths (default: same as a local victim).
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 0.5)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda2: f64,
    #[arg(long, default_value_t = 1.5)]
    temperature: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Fine-tuning learning rates as `epoch:rate,...`.
    #[arg(long, default_value = "1:0.05,21:0.01,41:0.002")]
    ft_schedule: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    oracle: OracleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ShadowFarmArgs {
    /// Protected training set.
    #[arg(long)]
    members: PathBuf,
    /// Data never used for training the protected model.
    #[arg(long)]
    nonmembers: PathBuf,
    #[arg(long, default_value = "label")]
    label_col: String,
    #[arg(long, default_value_t = 32)]
    n_models: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct FindSensitiveArgs {
    #[arg(long)]
    farm: PathBuf,
    /// Keep only the `top` highest-scoring samples.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SuspectArgs {
    /// Suspect model file, or base URL of a prediction server.
    #[arg(long)]
    suspect: String,
    #[arg(long)]
    members: PathBuf,
    #[arg(long)]
    nonmembers: PathBuf,
    #[arg(long, default_value = "label")]
    label_col: String,
    #[arg(long, default_value = "per-sample")]
    attack: String,
    #[arg(long, default_value = "basic")]
    mode: String,
    /// Shadow farm directory; needed for the per-sample attack and enhanced mode.
    #[arg(long)]
    farm: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Loss bound of the global attack (default: the largest clamped loss).
    #[arg(long)]
    loss_bound: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    oracle: OracleArgs,
}

#[derive(Debug, Args, Serialize)]
struct VerifyArgs {
    #[command(flatten)]
    suspect: SuspectArgs,
    #[arg(long)]
    n_s: usize,
    /// Exit with status 3 unless the suspect is judged stolen.
    #[arg(long)]
    assert_stolen: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct MinNsArgs {
    #[command(flatten)]
    suspect: SuspectArgs,
    #[arg(long, value_delimiter = ',', default_value = "2,5,10,15,20,30,40,50,75,100")]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct DpBoundArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    epsilons: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    n_s: Vec<usize>,
    #[arg(long)]
    sigma0: f64,
    /// Defaults to `--sigma0`.
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value_t = 4)]
    threads: usize,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn emit_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn print_json<T: Serialize>(value: &T) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string(value).expect("serializable output"));
    let _ = out.flush();
}

/// Appends `--key value` for every config-file entry whose flag is absent
/// from `argv`. Entries come from the file's top level and from the table
/// named after the subcommand.
fn merge_config(argv: Vec<String>) -> CliResult<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = match argv[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => match argv.get(pos + 1) {
            Some(p) => p.clone(),
            None => return usage("--config needs a file path"),
        },
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Usage(format!("config file {path}: {e}")))?;
    let table: toml::Table = text.parse().map_err(|e| Failure::Usage(format!("config file {path}: {e}")))?;
    let subcommand = argv.iter().skip(1).find(|a| !a.starts_with('-')).cloned();
    let mut entries: Vec<(String, toml::Value)> = Vec::new();
    for (k, v) in &table {
        match v {
            toml::Value::Table(sub) if Some(k) == subcommand.as_ref() => {
                entries.extend(sub.iter().map(|(k, v)| (k.clone(), v.clone())))
            }
            toml::Value::Table(_) => {}
            _ => entries.push((k.clone(), v.clone())),
        }
    }
    let mut out = argv;
    for (key, value) in entries {
        let flag = format!("--{}", key.replace('_', "-"));
        let present = out.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if present {
            continue;
        }
        let scalar = |v: &toml::Value| -> CliResult<String> {
            match v {
                toml::Value::String(s) => Ok(s.clone()),
                toml::Value::Integer(i) => Ok(i.to_string()),
                toml::Value::Float(f) => Ok(format!("{f:?}")),
                toml::Value::Boolean(b) => Ok(b.to_string()),
                other => usage(format!("config key {key}: unsupported value {other}")),
            }
        };
        match &value {
            toml::Value::Boolean(true) => out.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let parts = items.iter().map(scalar).collect::<CliResult<Vec<_>>>()?;
                out.push(flag);
                out.push(parts.join(","));
            }
            v => {
                out.push(flag);
                out.push(scalar(v)?);
            }
        }
    }
    Ok(out)
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let merged = match merge_config(argv.clone()) {
        Ok(a) => a,
        Err(f) => return report(f),
    };
    let cli = match Cli::try_parse_from(&merged) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            emit_error("usage", first);
            eprintln!("{rendered}");
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli, &merged) {
        Ok(code) => code,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> i32 {
    match f {
        Failure::Usage(msg) => {
            emit_error("usage", &msg);
            eprintln!("run `veridip --help` for usage");
            EXIT_USAGE
        }
        Failure::Runtime(e) => {
            emit_error(e.kind(), &e.to_string());
            EXIT_RUNTIME
        }
    }
}

fn snapshot<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

fn manifest_target(cli: &Cli, out: &Path) -> PathBuf {
    cli.manifest.clone().unwrap_or_else(|| manifest_path_for(out))
}

fn dispatch(cli: &Cli, argv: &[String]) -> CliResult<i32> {
    match &cli.command {
        Command::GenData(a) => gen_data_cmd(cli, argv, a),
        Command::Train(a) => train_cmd(cli, argv, a),
        Command::DpTrain(a) => dp_train_cmd(cli, argv, a),
        Command::Steal(a) => steal_cmd(cli, argv, a),
        Command::ShadowFarm(a) => shadow_farm_cmd(cli, argv, a),
        Command::FindSensitive(a) => find_sensitive_cmd(cli, argv, a),
        Command::Verify(a) => verify_cmd(cli, argv, a),
        Command::MinNs(a) => min_ns_cmd(cli, argv, a),
        Command::DpBound(a) => dp_bound_cmd(cli, argv, a),
        Command::Serve(a) => serve_cmd(cli, argv, a),
    }
}

fn parse_pairs(spec: &str, what: &str) -> CliResult<Vec<(usize, f64)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (e, v) = item
                .split_once(':')
                .ok_or_else(|| Failure::Usage(format!("{what}: expected `epoch:value`, got {item:?}")))?;
            let e = e.trim().parse().map_err(|_| Failure::Usage(format!("{what}: bad epoch {e:?}")))?;
            let v = v.trim().parse().map_err(|_| Failure::Usage(format!("{what}: bad value {v:?}")))?;
            Ok((e, v))
        })
        .collect()
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> CliResult<T> {
    Ok(s.parse::<T>()?)
}

fn dims(input: usize, hidden: &[usize], classes: usize) -> Vec<usize> {
    std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(classes)).collect()
}

/// Names the file in I/O errors.
fn at_path<T>(path: impl AsRef<Path>, r: veridip_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Failure::Runtime(Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.as_ref().display()),
        ))),
        Error::Csv(c) => {
            let msg = format!("{}: {c}", path.as_ref().display());
            match c.into_kind() {
                csv::ErrorKind::Io(io) => Failure::Runtime(Error::Io(std::io::Error::new(io.kind(), msg))),
                _ => Failure::Runtime(Error::Data(msg)),
            }
        }
        other => other.into(),
    })
}

fn load_data(path: &Path, label_col: &str) -> CliResult<Dataset> {
    at_path(path, Dataset::load_csv(path, label_col))
}

fn load_model_at(path: impl AsRef<Path>) -> CliResult<MlpModel> {
    at_path(&path, load_model(&path))
}

fn load_farm(dir: &Path) -> CliResult<ShadowFarm> {
    at_path(dir, ShadowFarm::load(dir))
}

fn sibling(out: &Path, tag: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    out.with_file_name(format!("{stem}.{tag}.{ext}"))
}

fn gen_data_cmd(cli: &Cli, argv: &[String], a: &GenDataArgs) -> CliResult<i32> {
    let mut m = ManifestBuilder::new("gen-data", argv, snapshot(a));
    m.seed("data", a.seed);
    let data = gen_synthetic(a.n, a.dim, a.classes, a.separation, a.noise, a.seed)?;
    data.save_csv(&a.out)?;
    m.output(&a.out);
    let mut summary = serde_json::json!({ "rows": data.len(), "out": a.out });
    if let Some(fr) = &a.split {
        if fr.len() != 3 {
            return usage("--split takes three fractions: train,test,holdout");
        }
        let spec = SplitSpec { train: fr[0], test: fr[1], holdout: fr[2], seed: a.seed };
        let (tr, te, ho) = split(&data, &spec)?;
        for (tag, part) in [("train", &tr), ("test", &te), ("holdout", &ho)] {
            let path = sibling(&a.out, tag);
            part.save_csv(&path)?;
            m.output(&path);
            summary[tag] = serde_json::json!(part.len());
        }
    }
    m.finish(&manifest_target(cli, &a.out))?;
    print_json(&summary);
    Ok(EXIT_OK)
}

fn train_config(fit: &FitArgs, seed: u64) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        optimizer: parse::<Optimizer>(&fit.optimizer)?,
        learning_rate: fit.lr,
        epochs: fit.epochs,
        batch_size: fit.batch_size,
        lr_schedule: match &fit.lr_schedule {
            Some(s) => parse_pairs(s, "--lr-schedule")?,
            None => Vec::new(),
        },
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(cli: &Cli, argv: &[String], a: &TrainArgs) -> CliResult<i32> {
    let mut m = ManifestBuilder::new("train", argv, snapshot(a));
    m.seed("init", a.seed);
    m.seed("train", a.seed);
    let data = load_data(&a.data, &a.label_col)?;
    m.input(&a.data.to_string_lossy())?;
    let test = match &a.test {
        Some(p) => {
            m.input(&p.to_string_lossy())?;
            let t = load_data(p, &a.label_col)?;
            let k = data.classes().max(t.classes());
            Some(t.with_classes(k)?)
        }
        None => None,
    };
    let classes = test.as_ref().map_or(data.classes(), |t| t.classes().max(data.classes()));
    let data = data.with_classes(classes)?;
    let cfg = train_config(&a.fit, a.seed)?;
    let init = MlpModel::init(&dims(data.dim(), &a.model.hidden, classes), parse(&a.model.activation)?, a.seed)?;
    let (model, history) = train_with_eval(&init, &data, &cfg, None, test.as_ref())?;
    save_model(&model, &a.out)?;
    m.output(&a.out);
    let hist_path = sibling(&a.out, "history").with_extension("json");
    std::fs::write(&hist_path, serde_json::to_vec_pretty(&history).map_err(Error::from)?)?;
    m.output(&hist_path);
    m.finish(&manifest_target(cli, &a.out))?;
    print_json(&serde_json::json!({
        "out": a.out,
        "train_accuracy": accuracy(&model, &data),
        "test_accuracy": test.as_ref().map(|t| accuracy(&model, t)),
    }));
    Ok(EXIT_OK)
}

fn dp_train_cmd(cli: &Cli, argv: &[String], a: &DpTrainArgs) -> CliResult<i32> {
    let mut m = ManifestBuilder::new("dp-train", argv, snapshot(a));
    m.seed("init", a.seed);
    m.seed("train", a.seed);
    let data = load_data(&a.data, &a.label_col)?;
    m.input(&a.data.to_string_lossy())?;
    let cfg = DpConfig {
        clip_threshold: a.clip,
        noise_multiplier: a.noise_multiplier,
        target_delta: a.delta,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        optimizer: parse(&a.optimizer)?,
        seed: a.seed,
    };
    cfg.validate()?;
    let init = MlpModel::init(&dims(data.dim(), &a.model.hidden, data.classes()), parse(&a.model.activation)?, a.seed)?;
    let outcome = dp_train(&init, &data, &cfg)?;
    save_model(&outcome.model, &a.out)?;
    m.output(&a.out);
    m.finish(&manifest_target(cli, &a.out))?;
    print_json(&serde_json::json!({
        "out": a.out,
        "epsilon": outcome.spent_epsilon,
        "delta": a.delta,
        "best_order": outcome.best_order,
        "steps": outcome.steps,
        "sampling_rate": outcome.sampling_rate,
        "train_accuracy": accuracy(&outcome.model, &data),
    }));
    Ok(EXIT_OK)
}

fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

fn open_oracle(suspect: &str, o: &OracleArgs) -> CliResult<Box<dyn PredictionOracle>> {
    if is_url(suspect) {
        let cfg = RemoteConfig {
            timeout: Duration::from_millis(o.timeout_ms),
            max_retries: o.retries,
            batch_size: o.query_batch,
            budget: o.budget,
            ..RemoteConfig::default()
        };
        let remote = RemoteOracle::new(suspect, cfg).map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(Box::new(remote))
    } else {
        Ok(Box::new(LocalOracle::with_budget(load_model_at(suspect)?, o.budget)))
    }
}

fn steal_cmd(cli: &Cli, argv: &[String], a: &StealArgs) -> CliResult<i32> {
    let mut m = ManifestBuilder::new("steal", argv, snapshot(a));
    m.seed("steal", a.seed);
    let attack: StealAttack = parse(&a.attack)?;
    let data = load_data(&a.data, &a.label_col)?;
    m.input(&a.data.to_string_lossy())?;
    m.input(&a.victim)?;
    let cfg = StealConfig {
        attack,
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        temperature: a.temperature,
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        optimizer: Optimizer::Adam,
        ft_lr_schedule: parse_pairs(&a.ft_schedule, "--ft-schedule")?,
        attacker_fraction: a.fraction,
        seed: a.seed,
    };
    cfg.validate()?;
    let local = if is_url(&a.victim) { None } else { Some(load_model_at(&a.victim)?) };
    let classes = local.as_ref().map_or(data.classes(), |v| v.classes());
    let data = data.with_classes(classes)?;
    let owned = attacker_subset(&data, a.fraction, a.seed)?;
    let student_dims = match (&a.hidden, &local) {
        (Some(h), _) => dims(data.dim(), h, classes),
        (None, Some(v)) => v.layer_dims().to_vec(),
        (None, None) => return usage("--hidden is required when the victim is remote"),
    };
    let activation: Activation = parse(&a.activation)?;
    let (stolen, queries) = match attack {
        StealAttack::Ft => {
            let Some(v) = &local else {
                return usage("fine-tuning needs the victim model file, not a URL");
            };
            (steal_ft(v, &owned, &cfg)?, 0)
        }
        StealAttack::Me | StealAttack::Kd => {
            let oracle = open_oracle(&a.victim, &a.oracle)?;
            let s = if attack == StealAttack::Me {
                steal_me(oracle.as_ref(), &owned.rows(), &cfg, &student_dims, activation)?
            } else {
                steal_kd(oracle.as_ref(), &owned, &cfg, &student_dims, activation)?
            };
            (s, oracle.query_count())
        }
    };
    save_model(&stolen, &a.out)?;
    m.output(&a.out);
    m.finish(&manifest_target(cli, &a.out))?;
    print_json(&serde_json::json!({
        "out": a.out,
        "attack": attack,
        "attacker_samples": owned.len(),
        "victim_queries": queries,
        "train_accuracy": accuracy(&stolen, &data),
    }));
    Ok(EXIT_OK)
}

fn load_pools(members: &Path, nonmembers: &Path, label_col: &str, classes: Option<usize>) -> CliResult<(Dataset, Dataset)> {
    let mem = load_data(members, label_col)?;
    let non = load_data(nonmembers, label_col)?;
    let k = classes.unwrap_or_else(|| mem.classes().max(non.classes()));
    Ok((mem.with_classes(k)?, non.with_classes(k)?))
}

fn shadow_farm_cmd(cli: &Cli, argv: &[String], a: &ShadowFarmArgs) -> CliResult<i32> {
    let mut m = ManifestBuilder::new("shadow-farm", argv, snapshot(a));
    m.seed("farm", a.seed);
    let (mem, non) = load_pools(&a.members, &a.nonmembers, &a.label_col, None)?;
    m.input(&a.members.to_string_lossy())?;
    m.input(&a.nonmembers.to_string_lossy())?;
    let base = mem.concat(&non)?;
    let spec = ShadowSpec {
        layer_dims: dims(base.dim(), &a.model.hidden, base.classes()),
        activation: parse(&a.model.activation)?,
        train: train_config(&a.fit, a.seed)?,
    };
    let farm = build_farm(&base, a.n_models, &spec, a.seed)?.with_member_count(mem.len())?;
    farm.save(&a.out)?;
    m.output(&a.out);
    m.finish(&manifest_target(cli, &a.out.join("farm")))?;
    print_json(&serde_json::json!({
        "out": a.out,
        "models": farm.len(),
        "samples": farm.n_samples(),
        "members": mem.len(),
    }));
    Ok(EXIT_OK)
}

fn find_sensitive_cmd(cli: &Cli, argv: &[String], a: &FindSensitiveArgs) -> CliResult<i32> {
    let mut m = ManifestBuilder::new("find-sensitive", argv, snapshot(a));
    let farm = load_farm(&a.farm)?;
    m.input(&a.farm.to_string_lossy())?;
    let limit = farm.member_count().unwrap_or(farm.n_samples());
    let mut rows: Vec<_> = farm.eta_scores().into_iter().filter(|e| e.sample_id < limit).collect();
    if let Some(k) = a.top {
        rows.truncate(k);
    }
    let mut w = csv::Writer::from_path(&a.out).map_err(Error::from)?;
    w.write_record(["sample_id", "eta", "mean_loss_in", "mean_loss_out"]).map_err(Error::from)?;
    for e in &rows {
        w.write_record([
            e.sample_id.to_string(),
            format!("{:.16e}", e.eta),
            format!("{:.16e}", e.mean_loss_in),
            format!("{:.16e}", e.mean_loss_out),
        ])
        .map_err(Error::from)?;
    }
    w.flush()?;
    m.output(&a.out);
    m.finish(&manifest_target(cli, &a.out))?;
    print_json(&serde_json::json!({ "out": a.out, "rows": rows.len() }));
    Ok(EXIT_OK)
}

struct Prepared {
    members: Dataset,
    nonmembers: Dataset,
    farm: Option<ShadowFarm>,
    attack: Attack,
    mode: VerifyMode,
    oracle: Box<dyn PredictionOracle>,
}

fn prepare(s: &SuspectArgs, m: &mut ManifestBuilder) -> CliResult<Prepared> {
    m.seed("verify", s.seed);
    let tag: AttackTag = parse(&s.attack)?;
    let mode: VerifyMode = parse(&s.mode)?;
    let oracle = open_oracle(&s.suspect, &s.oracle)?;
    m.input(&s.suspect)?;
    m.input(&s.members.to_string_lossy())?;
    m.input(&s.nonmembers.to_string_lossy())?;
    let farm = match &s.farm {
        Some(dir) => {
            m.input(&dir.to_string_lossy())?;
            Some(load_farm(dir)?)
        }
        None => None,
    };
    let classes = farm.as_ref().map(|f| f.base().classes());
    let (members, nonmembers) = load_pools(&s.members, &s.nonmembers, &s.label_col, classes)?;
    let mut mia = MiaConfig::default();
    if let Some(b) = s.loss_bound {
        mia.loss_bound = b;
    }
    let attack = match tag {
        AttackTag::Global => Attack::global(&mia)?,
        AttackTag::PerSample => match &farm {
            Some(f) => Attack::PerSample(PerSampleAttack::from_farm(f, &mia)?),
            None => return usage("the per-sample attack needs --farm"),
        },
    };
    if mode == VerifyMode::Enhanced && farm.is_none() {
        return usage("enhanced mode needs --farm");
    }
    Ok(Prepared { members, nonmembers, farm, attack, mode, oracle })
}

impl Prepared {
    fn verifier(&self) -> CliResult<Verifier<'_>> {
        let v = Verifier::new(&self.members, &self.nonmembers, self.attack.clone())?;
        Ok(match &self.farm {
            Some(f) => v.with_farm(f)?,
            None => v,
        })
    }
}

fn verify_cmd(cli: &Cli, argv: &[String], a: &VerifyArgs) -> CliResult<i32> {
    let mut m = ManifestBuilder::new("verify", argv, snapshot(a));
    let p = prepare(&a.suspect, &mut m)?;
    let verdict = p.verifier()?.ownership_test(p.oracle.as_ref(), a.n_s, a.suspect.alpha, p.mode, a.suspect.seed)?;
    std::fs::write(&a.out, serde_json::to_vec_pretty(&verdict).map_err(Error::from)?)?;
    m.output(&a.out);
    m.finish(&manifest_target(cli, &a.out))?;
    print_json(&verdict);
    Ok(if a.assert_stolen && !verdict.stolen() { EXIT_NOT_STOLEN } else { EXIT_OK })
}

fn min_ns_cmd(cli: &Cli, argv: &[String], a: &MinNsArgs) -> CliResult<i32> {
    let mut m = ManifestBuilder::new("min-ns", argv, snapshot(a));
    let p = prepare(&a.suspect, &mut m)?;
    let found = p.verifier()?.min_exposed_search(
        p.oracle.as_ref(),
        a.suspect.alpha,
        p.mode,
        &a.grid,
        a.repeats,
        a.suspect.seed,
    )?;
    let report = serde_json::json!({
        "min_n_s": found.n_s,
        "alpha": a.suspect.alpha,
        "mode": p.mode,
        "attack": p.attack.tag(),
        "repeats": a.repeats,
        "evaluated": found.evaluated.iter().map(|(n, med)| serde_json::json!({"n_s": n, "median_p": med})).collect::<Vec<_>>(),
        "queries": p.oracle.query_count(),
    });
    std::fs::write(&a.out, serde_json::to_vec_pretty(&report).map_err(Error::from)?)?;
    m.output(&a.out);
    m.finish(&manifest_target(cli, &a.out))?;
    print_json(&report);
    Ok(EXIT_OK)
}

fn dp_bound_cmd(cli: &Cli, argv: &[String], a: &DpBoundArgs) -> CliResult<i32> {
    let m = ManifestBuilder::new("dp-bound", argv, snapshot(a));
    let rows = bound_curve(&a.epsilons, &a.n_s, a.sigma0, a.sigma1.unwrap_or(a.sigma0))?;
    let file = std::fs::File::create(&a.out)?;
    write_bound_csv(&rows, std::io::BufWriter::new(file))?;
    let mut m = m;
    m.output(&a.out);
    m.finish(&manifest_target(cli, &a.out))?;
    print_json(&serde_json::json!({ "out": a.out, "rows": rows.len() }));
    Ok(EXIT_OK)
}

fn serve_cmd(cli: &Cli, argv: &[String], a: &ServeArgs) -> CliResult<i32> {
    let mut m = ManifestBuilder::new("serve", argv, snapshot(a));
    let model = load_model_at(&a.model)?;
    m.input(&a.model.to_string_lossy())?;
    let server = PredictServer::start(model, &format!("{}:{}", a.host, a.port), a.threads)?;
    let target = cli.manifest.clone().unwrap_or_else(|| manifest_path_for(&a.model.with_extension("serve")));
    m.output(server.url());
    m.finish(&target)?;
    print_json(&serde_json::json!({ "listening": server.url() }));
    server.wait();
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_fills_missing_flags_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 4\n[gen-data]\nn = 10\ndim = 3\nsplit = [0.5, 0.25, 0.25]\n[train]\nepochs = 9\n").unwrap();
        let argv: Vec<String> = ["veridip", "gen-data", "--config", path.to_str().unwrap(), "--n", "20", "--out", "x.csv"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let merged = match merge_config(argv) {
            Ok(m) => m,
            Err(_) => panic!("merge failed"),
        };
        let cli = Cli::try_parse_from(&merged).unwrap();
        let Command::GenData(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!((a.n, a.dim, a.seed), (20, 3, 4));
        assert_eq!(a.split, Some(vec![0.5, 0.25, 0.25]));
        assert!(!merged.iter().any(|s| s == "--epochs"));
    }

    #[test]
    fn schedule_parsing() {
        assert_eq!(parse_pairs("1:0.05,21:0.01", "x").ok(), Some(vec![(1, 0.05), (21, 0.01)]));
        assert!(parse_pairs("1-0.05", "x").is_err());
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("d/data.csv"), "train"), PathBuf::from("d/data.train.csv"));
    }
}
