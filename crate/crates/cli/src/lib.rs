//! Command-line driver: dataset generation, training, evaluation and the
//! ablation grids.

mod ablate;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use iclr_core::checkpoint::Checkpoint;
use iclr_core::data::{gen_gaussian_mixture, Dataset, MixtureSpec};
use iclr_core::eval::pca_2d;
use iclr_core::experiment::{full_eval, prepare_data, run_seed, Axis, DatasetSpec, EvalReport, RunConfig};
use iclr_core::rng::{substream, Stream};
use iclr_core::trainer::{embed_all, TrainState};
use iclr_core::eval::MetricsRecord;
use iclr_core::Error;

pub use ablate::{cmd_ablate, read_rows, AblationRow, AblationSummary, VariantSummary};
pub use output::{read_jsonl, JsonlWriter};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "ICLR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "iclr", version, about = "Contrastive representation learning with online pseudo-labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark (or validate an IDX pair) and save it.
    GenerateData(CommonArgs),
    /// Train one seed (`--seed`) or every seed of the config.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the configured dataset split.
    Eval(EvalArgs),
    /// Run one ablation grid over the configured seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file to evaluate on instead of the configured dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub axis: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    /// 0 success, 2 configuration, 3 numeric, 4 I/O or format, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(Error::Numeric(_) | Error::Degenerate(_)) => 3,
            CliError::Io(_) | CliError::Csv(_) => 4,
            CliError::Core(Error::Io(_) | Error::Format(_) | Error::Json(_)) => 4,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::GenerateData(args) => cmd_generate_data(args).map(|_| ()),
        Command::Train(args) => cmd_train(args).map(|_| ()),
        Command::Eval(args) => cmd_eval(args).map(|_| ()),
        Command::Ablate(args) => {
            let axis: Axis = args.axis.parse()?;
            cmd_ablate(axis, &args.common).map(|_| ())
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t >= 1)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    // A second call in the same process (tests) finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Reads the config file, or the defaults when no path is given. A missing
/// or unreadable file is a configuration error.
pub fn load_config(args: &CommonArgs) -> CliResult<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    config.train.deterministic = args.deterministic;
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    mixture: Option<&'a MixtureSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<&'a DatasetSpec>,
    samples: usize,
    dim: usize,
    class_count: usize,
}

pub const DATASET_FILE: &str = "dataset.bin";
pub const SIDECAR_FILE: &str = "dataset.json";

/// Writes `dataset.bin` and its `dataset.json` sidecar; returns the dataset path.
pub fn cmd_generate_data(args: &CommonArgs) -> CliResult<PathBuf> {
    let config = load_config(args)?;
    fs::create_dir_all(&config.out_dir)?;
    let (dataset, sidecar_body) = match &config.dataset {
        DatasetSpec::Gaussian { mixture, seed } => {
            let seed = args.seed.unwrap_or(*seed);
            let data = gen_gaussian_mixture(mixture, &mut substream(seed, Stream::Data, 0, 0))?;
            let body = serde_json::to_string_pretty(&Sidecar {
                kind: "gaussian",
                mixture: Some(mixture),
                seed: Some(seed),
                source: None,
                samples: data.len(),
                dim: data.dim(),
                class_count: data.class_count,
            })?;
            (data, body)
        }
        other => {
            let data = other.load()?;
            let body = serde_json::to_string_pretty(&Sidecar {
                kind: "imported",
                mixture: None,
                seed: None,
                source: Some(other),
                samples: data.len(),
                dim: data.dim(),
                class_count: data.class_count,
            })?;
            (data, body)
        }
    };
    let path = config.out_dir.join(DATASET_FILE);
    dataset.save(&path)?;
    fs::write(config.out_dir.join(SIDECAR_FILE), sidecar_body + "\n")?;
    println!("wrote {} ({} samples, dim {})", path.display(), dataset.len(), dataset.dim());
    Ok(path)
}

/// Mixture parameters and seed recorded in a generation sidecar.
pub fn read_sidecar(path: &Path) -> CliResult<(MixtureSpec, u64)> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mixture = serde_json::from_value(value["mixture"].clone())?;
    let seed = value["seed"]
        .as_u64()
        .ok_or_else(|| CliError::Io(format!("{} has no seed", path.display())))?;
    Ok((mixture, seed))
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ITERATIONS_FILE: &str = "iterations.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const FINAL_FILE: &str = "final.bin";
pub const EVAL_FILE: &str = "eval.json";
pub const PCA_FILE: &str = "pca.csv";
pub const CONFIG_FILE: &str = "config.json";

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

#[derive(Debug, Serialize)]
struct Timing {
    epoch: usize,
    wall_ms: u64,
}

/// Result of one trained seed.
#[derive(Debug, Clone)]
pub struct TrainedSeed {
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: Vec<MetricsRecord>,
    pub report: Option<EvalReport>,
}

/// Trains one seed into `dir`: per-epoch metrics and checkpoint, per-iteration
/// log, final checkpoint and evaluation.
pub fn train_seed(config: &RunConfig, split: &iclr_core::data::Split, seed: u64, dir: &Path) -> CliResult<TrainedSeed> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&RunConfig { seeds: vec![seed], ..config.clone() })? + "\n")?;
    let deterministic = config.train.deterministic;
    let mut metrics_out = JsonlWriter::create(&dir.join(METRICS_FILE))?;
    let mut timing_out = JsonlWriter::create(&dir.join(TIMING_FILE))?;
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let mut on_epoch = |state: &TrainState, record: &MetricsRecord| -> iclr_core::Result<()> {
        let mut logged = record.clone();
        if deterministic {
            // Wall time would make the stream run-dependent; it goes to timing.jsonl.
            logged.wall_ms = 0;
        }
        metrics_out.write(&logged)?;
        timing_out.write(&Timing { epoch: record.epoch, wall_ms: record.wall_ms })?;
        checkpoint_of(state, record.epoch as u64 + 1).save(&checkpoint_path)
    };
    let started = Instant::now();
    let result = run_seed(config, split, seed, Some(&mut on_epoch))?;
    metrics_out.finish()?;
    timing_out.finish()?;

    let mut iterations = JsonlWriter::create(&dir.join(ITERATIONS_FILE))?;
    for record in &result.outcome.iterations {
        iterations.write(record)?;
    }
    iterations.finish()?;
    checkpoint_of(&result.outcome.state, config.train.epochs as u64).save(&dir.join(FINAL_FILE))?;
    if let Some(report) = &result.report {
        fs::write(dir.join(EVAL_FILE), serde_json::to_string_pretty(report)? + "\n")?;
    }
    let last = result.outcome.metrics.last().expect("at least one epoch");
    println!(
        "seed {seed}: {} epochs in {:.1}s, loss {:.4}, knn_acc {:.4}, nmi {:.4}",
        result.outcome.metrics.len(),
        started.elapsed().as_secs_f64(),
        last.loss_total,
        last.knn_acc,
        last.nmi
    );
    Ok(TrainedSeed { seed, dir: dir.to_path_buf(), metrics: result.outcome.metrics, report: result.report })
}

fn checkpoint_of(state: &TrainState, epochs_done: u64) -> Checkpoint {
    Checkpoint {
        epochs_done,
        params: state.params.clone(),
        bank: state.bank.clone(),
        clusters: state.clusters.clone(),
    }
}

pub fn cmd_train(args: &CommonArgs) -> CliResult<Vec<TrainedSeed>> {
    let config = load_config(args)?;
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    };
    let split = prepare_data(&config)?;
    seeds
        .into_iter()
        .map(|seed| train_seed(&config, &split, seed, &seed_dir(&config.out_dir, seed)))
        .collect()
}

/// `eval.json` contents.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct EvalOutput {
    pub knn_acc: f64,
    pub probe_acc: f64,
    pub nmi: f64,
    /// Share of embedding variance captured by the 2-D projection.
    pub pca_variance: f64,
    pub knn_k: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs_done: u64,
}

/// Loads a checkpoint, evaluates it on the configured split and writes
/// `eval.json` and `pca.csv` next to `--out` (default: the checkpoint's directory).
pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalOutput> {
    let mut config = load_config(&args.common)?;
    if let Some(data) = &args.data {
        config.dataset = DatasetSpec::File { path: data.clone() };
    }
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let split = prepare_data(&config)?;
    if checkpoint.params.input_dim() != split.train.dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {}-dimensional samples, dataset has {}",
            checkpoint.params.input_dim(),
            split.train.dim()
        )));
    }
    let report = full_eval(&checkpoint.params, &checkpoint.clusters, &split, &config.eval)?;
    let test = embed_all(&checkpoint.params, split.test.samples.view())?;
    let coords = pca_2d(test.view())?;
    let out = EvalOutput {
        knn_acc: report.knn_acc,
        probe_acc: report.probe_acc,
        nmi: report.nmi,
        pca_variance: captured_variance(&test, &coords),
        knn_k: config.eval.knn_k,
        train_size: report.train_size,
        test_size: report.test_size,
        epochs_done: checkpoint.epochs_done,
    };
    let dir = match &args.common.out {
        Some(d) => d.clone(),
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(EVAL_FILE), serde_json::to_string_pretty(&out)? + "\n")?;
    output::write_pca(&dir.join(PCA_FILE), &coords, split.test.true_labels.as_deref())?;
    println!(
        "knn_acc {:.4}  probe_acc {:.4}  nmi {:.4}  pca_variance {:.4}",
        out.knn_acc, out.probe_acc, out.nmi, out.pca_variance
    );
    Ok(out)
}

fn captured_variance(embeddings: &ndarray::Array2<f32>, coords: &ndarray::Array2<f64>) -> f64 {
    let x = embeddings.mapv(f64::from);
    let mean = x.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let total: f64 = (&x - &mean).mapv(|v| v * v).sum();
    if total > 0.0 {
        (coords.mapv(|v| v * v).sum() / total).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Loads a dataset file written by `generate-data`.
pub fn load_dataset(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::load(path)?)
}
