//! Command-line entry point: `generate`, `train`, `eval` and `verify`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence or
//! failed verification. Every command writes only under its `--out`
//! directory and leaves a `run_manifest.json` describing how to replay it.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_dataset, save_dataset, split_counts, DataError, SyntheticConfig};
use crate::dynamics::DynamicsKind;
use crate::loss::{LossConfig, LossError, WeightFn};
use crate::model::{Architecture, ModelError, ModelKind};
use crate::par::Execution;
use crate::train::{
    evaluate, load_checkpoint, save_checkpoint, train_with_progress, MetricsReport, TrainConfig, TrainError,
};
use crate::verify::{self, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) => EXIT_DATA,
            Self::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Argument(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => Self::Failure(e.to_string()),
            TrainError::Config(_) | TrainError::Loss(LossError::Config(_)) => Self::Usage(e.to_string()),
            TrainError::Model(ModelError::Config(_)) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "tgnn4i", version, about = "Continuous-time temporal GNN for irregular graph time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic periodic dataset.
    Generate(GenerateArgs),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Run the numerical verification suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the dataset.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub num_nodes: usize,
    #[arg(long, default_value_t = 200)]
    pub num_sequences: usize,
    /// Observation times drawn per sequence.
    #[arg(long, default_value_t = 70)]
    pub times_per_seq: usize,
    /// Points of the uniform grid on [0, 1].
    #[arg(long, default_value_t = 1000)]
    pub grid: usize,
    /// Probability that a node is observed at an observation time.
    #[arg(long, default_value_t = 0.5)]
    pub obs_fraction: f64,
    /// Time lag of neighbor influence.
    #[arg(long, default_value_t = 0.05)]
    pub lag: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 20.0)]
    pub phi_min: f64,
    #[arg(long, default_value_t = 100.0)]
    pub phi_max: f64,
    /// Train/validation/test ratios.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.5, 0.25, 0.25])]
    pub split: Vec<f64>,
    /// Worker threads (all cores when absent).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_model)]
    pub model: ModelKind,
    #[arg(long, value_parser = parse_dynamics, default_value = "static")]
    pub dynamics: DynamicsKind,
    /// Flat TOML file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (all cores when absent).
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

/// Training settings; each is also a key of the config file.
#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    /// Training weight function (w1..w4).
    #[arg(long)]
    pub weight: Option<String>,
    #[arg(long)]
    pub n_init: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Weight function of the reported test metric (w1..w4).
    #[arg(long)]
    pub metric_weight: Option<String>,
    #[arg(skip)]
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TrainOverrides {
    /// Values from `self` where present, otherwise from `base`.
    fn over(&self, base: &Self) -> Self {
        Self {
            d_h: self.d_h.or(base.d_h),
            hidden: self.hidden.or(base.hidden),
            lr: self.lr.or(base.lr),
            batch_size: self.batch_size.or(base.batch_size),
            max_epochs: self.max_epochs.or(base.max_epochs),
            patience: self.patience.or(base.patience),
            chunk_size: self.chunk_size.or(base.chunk_size),
            weight: self.weight.clone().or_else(|| base.weight.clone()),
            n_init: self.n_init.or(base.n_init),
            n_max: self.n_max.or(base.n_max),
            metric_weight: self.metric_weight.clone().or_else(|| base.metric_weight.clone()),
            seed: self.seed.or(base.seed),
        }
    }

    fn apply(&self, kind: ModelKind, dynamics: DynamicsKind) -> Result<TrainConfig, CliError> {
        let mut cfg = TrainConfig::desk(kind, dynamics);
        if let Some(d_h) = self.d_h {
            cfg.arch = Architecture::preset(kind, dynamics, d_h);
        }
        if let Some(h) = self.hidden {
            cfg.arch.hidden = h;
        }
        let weight = |s: &Option<String>, default: WeightFn| -> Result<WeightFn, CliError> {
            s.as_deref()
                .map_or(Ok(default), str::parse)
                .map_err(|e: LossError| CliError::Usage(e.to_string()))
        };
        cfg.lr = self.lr.unwrap_or(cfg.lr);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.max_epochs = self.max_epochs.unwrap_or(cfg.max_epochs);
        cfg.patience = self.patience.unwrap_or(cfg.patience);
        cfg.chunk_size = self.chunk_size.unwrap_or(cfg.chunk_size);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        let loss = LossConfig {
            weight: weight(&self.weight, cfg.loss.weight)?,
            n_init: self.n_init.unwrap_or(cfg.loss.n_init),
            n_max: self.n_max.unwrap_or(cfg.loss.n_max),
        };
        cfg.metric = LossConfig {
            weight: weight(&self.metric_weight, cfg.metric.weight)?,
            ..loss
        };
        cfg.loss = loss;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Weight function (w1..w4); defaults to the recorded metric's.
    #[arg(long)]
    pub weight: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_parser = parse_suite, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: ModelError| e.to_string())
}

fn parse_dynamics(s: &str) -> Result<DynamicsKind, String> {
    s.parse().map_err(|e: crate::dynamics::DynamicsError| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse()
}

/// What was run and what it produced; enough to replay the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub config_sha256: Option<String>,
    pub effective_config: serde_json::Value,
    pub seed: u64,
    pub out_dir: String,
    /// SHA-256 of every other file under the output directory, keyed by
    /// relative path.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, recorded) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, args: Vec<String>) -> Result<(), CliError> {
    match command {
        Command::Generate(a) => cmd_generate(&a, args),
        Command::Train(a) => cmd_train(&a, args),
        Command::Eval(a) => cmd_eval(&a, args),
        Command::Verify(a) => cmd_verify(&a),
    }
}

pub fn cmd_generate(a: &GenerateArgs, args: Vec<String>) -> Result<(), CliError> {
    let ratios: [f64; 3] = a
        .split
        .as_slice()
        .try_into()
        .map_err(|_| CliError::Usage("--split takes three ratios".into()))?;
    let config = SyntheticConfig {
        seed: a.seed,
        num_nodes: a.num_nodes,
        num_sequences: a.num_sequences,
        times_per_seq: a.times_per_seq,
        grid: a.grid,
        obs_fraction: a.obs_fraction,
        lag: a.lag,
        noise_std: a.noise_std,
        phi_range: [a.phi_min, a.phi_max],
        split: split_counts(a.num_sequences, ratios)?,
    };
    config.validate()?;
    let data = generate_synthetic(&config, &Execution::with_workers(a.workers))?;
    save_dataset(&data.split, &a.out)?;
    write_manifest(
        &a.out,
        "generate",
        args,
        None,
        serde_json::to_value(&config).expect("config serializes"),
        a.seed,
    )
}

pub fn cmd_train(a: &TrainArgs, args: Vec<String>) -> Result<(), CliError> {
    let (file, config_path, config_sha) = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let file: TrainOverrides = toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let sha = hex::encode(Sha256::digest(text.as_bytes()));
            (file, Some(path.display().to_string()), Some(sha))
        }
        None => (TrainOverrides::default(), None, None),
    };
    let flags = TrainOverrides {
        seed: a.seed,
        ..a.overrides.clone()
    };
    let config = flags.over(&file).apply(a.model, a.dynamics)?;
    let data = load_dataset(&a.data)?;
    let exec = Execution::with_workers(a.workers);
    let quiet = a.quiet;
    let outcome = train_with_progress(&config, &data, &exec, |log| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  train {:.6}  val {:.6}  best {:>4}  {:.1}s",
                log.epoch, log.train_loss, log.val_loss, log.best_epoch, log.secs
            );
        }
    })?;
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    if config.arch.kind.is_trainable() {
        save_checkpoint(&a.out.join("checkpoint"), &outcome.model, &outcome.params, &data.graph, &config.metric)?;
    }
    write_report(&a.out, &outcome.report)?;
    println!(
        "{} ({}): test loss x100 = {:.4} over {} predictions, best epoch {} of {}",
        config.arch.kind,
        config.arch.dynamics,
        outcome.report.test_loss_x100,
        outcome.report.test_predictions,
        outcome.report.best_epoch,
        outcome.report.epochs_run
    );
    write_manifest(
        &a.out,
        "train",
        args,
        config_path.zip(config_sha),
        serde_json::to_value(&config).expect("config serializes"),
        config.seed,
    )
}

pub fn cmd_eval(a: &EvalArgs, args: Vec<String>) -> Result<(), CliError> {
    let data = load_dataset(&a.data)?;
    let (model, params, manifest) = load_checkpoint(&a.checkpoint, &data.graph)?;
    let mut metric = manifest.metric;
    if let Some(w) = &a.weight {
        metric.weight = w.parse().map_err(|e: LossError| CliError::Usage(e.to_string()))?;
    }
    metric.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if data.val.is_empty() || data.test.is_empty() {
        return Err(CliError::Data("dataset needs nonempty validation and test splits".into()));
    }
    let exec = Execution::with_workers(a.workers);
    let chunk = TrainConfig::desk(model.kind(), model.architecture().dynamics).chunk_size;
    let start = std::time::Instant::now();
    let val = evaluate(&model, &params, &data.graph, &data.val, &metric, chunk, &exec)?;
    let test = evaluate(&model, &params, &data.graph, &data.test, &metric, chunk, &exec)?;
    let effective = serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "arch": manifest.arch,
        "metric": metric,
    });
    let report = MetricsReport {
        model: model.kind(),
        dynamics: model.architecture().dynamics,
        seed: 0,
        config_hash: hex::encode(Sha256::digest(effective.to_string().as_bytes())),
        num_params: params.num_scalars(),
        train_curve: Vec::new(),
        val_curve: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
        best_val: val.loss,
        test_loss_x100: test.loss_x100(),
        test_predictions: test.num_predictions,
        test_bins: test.bins,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    write_report(&a.out, &report)?;
    println!(
        "{} ({}), weight {}: test loss x100 = {:.4} over {} predictions",
        report.model, report.dynamics, metric.weight, report.test_loss_x100, report.test_predictions
    );
    write_manifest(&a.out, "eval", args, None, effective, 0)
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<(), CliError> {
    let report = verify::run(a.suite, a.seed);
    for check in &report.checks {
        println!("{check}");
    }
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(CliError::Failure(format!("{failed} of {} checks failed", report.checks.len())))
    }
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<(), CliError> {
    let path = out.join("metrics.json");
    fs::write(&path, report.to_json() + "\n").map_err(|e| io_error(&path, e))?;
    let path = out.join("binned.csv");
    fs::write(&path, report.bins_csv()).map_err(|e| io_error(&path, e))
}

fn write_manifest(
    out: &Path,
    command: &str,
    args: Vec<String>,
    config: Option<(String, String)>,
    effective_config: serde_json::Value,
    seed: u64,
) -> Result<(), CliError> {
    let mut artifacts = BTreeMap::new();
    collect_checksums(out, out, &mut artifacts)?;
    let (config_path, config_sha256) = config.unzip();
    let manifest = RunManifest {
        command: command.into(),
        args,
        config_path,
        config_sha256,
        effective_config,
        seed,
        out_dir: out.display().to_string(),
        artifacts,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| io_error(&path, e))
}

fn collect_checksums(root: &Path, dir: &Path, into: &mut BTreeMap<String, String>) -> Result<(), CliError> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| io_error(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_checksums(root, &path, into)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("under root");
        if rel == Path::new(MANIFEST_FILE) {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        into.insert(key, hex::encode(Sha256::digest(&bytes)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("tgnn4i").chain(args.iter().copied()))
    }

    #[test]
    fn config_file_values_yield_to_flags() {
        let file: TrainOverrides = toml::from_str("lr = 0.01\npatience = 3\nweight = \"w1\"\n").unwrap();
        let flags = TrainOverrides {
            patience: Some(7),
            ..TrainOverrides::default()
        };
        let cfg = flags.over(&file).apply(ModelKind::Tgnn4i, DynamicsKind::Exponential).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.patience, 7);
        assert_eq!(cfg.loss.weight, WeightFn::W1);
        assert_eq!(cfg.metric.weight, WeightFn::W2);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<TrainOverrides>("learning_rate = 0.1\n").is_err());
    }

    #[test]
    fn unknown_weight_is_a_usage_error() {
        let flags = TrainOverrides {
            weight: Some("w9".into()),
            ..TrainOverrides::default()
        };
        let err = flags.apply(ModelKind::Tgnn4i, DynamicsKind::Static).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn parses_every_model_and_rejects_unknown_ones() {
        for kind in ModelKind::ALL {
            let cli = parse(&["train", "--data", "d", "--out", "o", "--model", kind.name()]).unwrap();
            match cli.command {
                Command::Train(a) => assert_eq!(a.model, kind),
                other => panic!("{other:?}"),
            }
        }
        assert!(parse(&["train", "--data", "d", "--out", "o", "--model", "lstm"]).is_err());
        assert!(parse(&["verify", "--suite", "everything"]).is_err());
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(run_from(["tgnn4i", "--help"]), EXIT_OK);
        assert_eq!(run_from(["tgnn4i", "frobnicate"]), EXIT_USAGE);
        let missing = tempfile::tempdir().unwrap();
        let out = missing.path().join("out");
        let data = missing.path().join("absent");
        let code = run_from([
            "tgnn4i",
            "train",
            "--data",
            data.to_str().unwrap(),
            "--model",
            "predict-prev",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_DATA);
        assert!(!out.exists());
        let code = run_from(["tgnn4i", "generate", "--obs-fraction", "1.5", "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_USAGE);
        assert!(!out.exists());
    }

    #[test]
    fn divergence_maps_to_failure() {
        let e = TrainError::Divergence {
            epoch: 1,
            batch: 1,
            detail: "nan".into(),
        };
        assert_eq!(CliError::from(e).exit_code(), EXIT_FAILURE);
    }
}
