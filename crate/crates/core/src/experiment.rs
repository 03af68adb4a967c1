//! Run configuration, single-variant runs and the ablation grids.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterState;
use crate::data::{gen_gaussian_mixture, load_idx, split, Dataset, MixtureSpec, Split};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{knn_accuracy, linear_probe, nmi, MetricsRecord};
use crate::rng::{substream, Stream};
use crate::sampling::Strategy;
use crate::trainer::{embed_all, train, EpochEval, EpochHook, LabelMode, TrainConfig, TrainInput, TrainOutcome, TrainState};

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Planted Gaussian mixture generated from `seed`.
    Gaussian {
        #[serde(flatten)]
        mixture: MixtureSpec,
        #[serde(default)]
        seed: u64,
    },
    /// An IDX image file with an optional label file.
    Idx { images: PathBuf, labels: Option<PathBuf> },
    /// A dataset file written by `Dataset::save`.
    File { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Gaussian { mixture: MixtureSpec::default(), seed: 0 }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Gaussian { mixture, seed } => {
                gen_gaussian_mixture(mixture, &mut substream(*seed, Stream::Data, 0, 0))
            }
            DatasetSpec::Idx { images, labels } => load_idx(images, labels.as_deref()),
            DatasetSpec::File { path } => Dataset::load(path),
        }
    }

    /// Seed of the train/test split; fixed per dataset so every training
    /// seed sees the same partition.
    pub fn split_seed(&self) -> u64 {
        match self {
            DatasetSpec::Gaussian { seed, .. } => *seed,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Evaluate kNN and NMI after every epoch, not only at the end.
    pub every_epoch: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { knn_k: 5, probe_epochs: 200, probe_lr: 1.0, every_epoch: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub test_fraction: f64,
    /// Training settings, including the sampling and loss blocks. Its `seed`
    /// is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            test_fraction: 0.2,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seeds: (0..5).collect(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        if self.eval.knn_k < 1 || !(self.eval.probe_lr > 0.0) {
            return Err(Error::config("eval.knn_k must be >= 1 and eval.probe_lr > 0"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        if let DatasetSpec::Gaussian { mixture, .. } = &self.dataset {
            if mixture.classes < 2 || mixture.dim < 2 || mixture.per_class < 1 {
                return Err(Error::config("mixture needs >= 2 classes, >= 2 dims, >= 1 sample per class"));
            }
        }
        self.train.validate()
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }
}

/// Loads the dataset and splits it with the dataset's fixed split seed.
pub fn prepare_data(config: &RunConfig) -> Result<Split> {
    let data = config.dataset.load()?;
    split(&data, config.test_fraction, &mut substream(config.dataset.split_seed(), Stream::Split, 0, 0))
}

fn labels_of<'a>(d: &'a Dataset, what: &str) -> Result<&'a [usize]> {
    d.true_labels
        .as_deref()
        .ok_or_else(|| Error::config(format!("{what} set has no labels to evaluate against")))
}

/// Final evaluation of a trained encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub knn_acc: f64,
    pub probe_acc: f64,
    pub nmi: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// kNN accuracy of test embeddings against train embeddings, and NMI of the
/// pseudo-labels against the train labels.
pub fn quick_eval(
    params: &EncoderParams<f32>,
    clusters: &ClusterState,
    split: &Split,
    knn_k: usize,
) -> Result<EpochEval> {
    let train_labels = labels_of(&split.train, "train")?;
    let test_labels = labels_of(&split.test, "test")?;
    let train = embed_all(params, split.train.samples.view())?;
    let test = embed_all(params, split.test.samples.view())?;
    if clusters.len() != train_labels.len() {
        return Err(Error::shape(format!(
            "{} pseudo-labels for {} training samples",
            clusters.len(),
            train_labels.len()
        )));
    }
    Ok(EpochEval {
        knn_acc: knn_accuracy(train.view(), train_labels, test.view(), test_labels, knn_k)?,
        nmi: nmi(clusters.labels(), train_labels)?,
    })
}

pub fn full_eval(params: &EncoderParams<f32>, clusters: &ClusterState, split: &Split, cfg: &EvalConfig) -> Result<EvalReport> {
    let quick = quick_eval(params, clusters, split, cfg.knn_k)?;
    let train = embed_all(params, split.train.samples.view())?;
    let test = embed_all(params, split.test.samples.view())?;
    let probe_acc = linear_probe(
        train.view(),
        labels_of(&split.train, "train")?,
        test.view(),
        labels_of(&split.test, "test")?,
        cfg.probe_epochs,
        cfg.probe_lr,
    )?;
    Ok(EvalReport {
        knn_acc: quick.knn_acc,
        probe_acc,
        nmi: quick.nmi,
        train_size: split.train.len(),
        test_size: split.test.len(),
    })
}

type EpochCallback<'a> = dyn FnMut(&TrainState, &MetricsRecord) -> Result<()> + 'a;

struct LabelledHook<'a, 'b> {
    split: &'a Split,
    eval: &'a EvalConfig,
    on_epoch: Option<&'a mut EpochCallback<'b>>,
}

impl EpochHook for LabelledHook<'_, '_> {
    fn evaluate(&mut self, params: &EncoderParams<f32>, clusters: &ClusterState) -> Result<EpochEval> {
        if self.eval.every_epoch && self.split.train.true_labels.is_some() {
            quick_eval(params, clusters, self.split, self.eval.knn_k)
        } else {
            Ok(EpochEval { knn_acc: 0.0, nmi: 0.0 })
        }
    }

    fn epoch_end(&mut self, state: &TrainState, record: &MetricsRecord) -> Result<()> {
        match &mut self.on_epoch {
            Some(f) => f(state, record),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: Option<EvalReport>,
}

/// Trains one seed on the training split. Labels reach only the evaluation
/// hook; the report is `None` for unlabelled data.
pub fn run_seed(
    config: &RunConfig,
    split: &Split,
    seed: u64,
    on_epoch: Option<&mut EpochCallback<'_>>,
) -> Result<RunResult> {
    let train_cfg = config.with_seed(seed);
    let input = TrainInput { samples: split.train.samples.view(), shape: split.train.shape };
    let mut hook = LabelledHook { split, eval: &config.eval, on_epoch };
    let outcome = train(input, &train_cfg, &mut hook)?;
    let report = if split.train.true_labels.is_some() && split.test.true_labels.is_some() {
        Some(full_eval(&outcome.state.params, &outcome.state.clusters, split, &config.eval)?)
    } else {
        None
    };
    Ok(RunResult { outcome, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Labels,
    Sampling,
    Margin,
    Lambda,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Labels, Axis::Sampling, Axis::Margin, Axis::Lambda];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Labels => "labels",
            Axis::Sampling => "sampling",
            Axis::Margin => "margin",
            Axis::Lambda => "lambda",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis '{s}' (expected labels, sampling, margin or lambda)")))
    }
}

pub const INTER_MARGINS: [f64; 6] = [-0.75, -0.5, -0.25, 0.0, 0.25, 0.5];
pub const INTRA_MARGINS: [f64; 5] = [-0.5, -0.25, 0.0, 0.25, 0.5];
pub const LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Named training configurations along one axis, derived from `base`.
pub fn ablation_variants(axis: Axis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match axis {
        Axis::Labels => vec![
            ("online".to_string(), TrainConfig { label_mode: LabelMode::Online, ..base.clone() }),
            (
                format!("offline_e{}", base.offline_cadence_epochs),
                TrainConfig { label_mode: LabelMode::Offline, ..base.clone() },
            ),
        ],
        Axis::Sampling => Strategy::ALL
            .into_iter()
            .map(|s| {
                let mut c = base.clone();
                c.sampling.strategy = s;
                (s.name().to_string(), c)
            })
            .collect(),
        Axis::Margin => {
            let inter = INTER_MARGINS.into_iter().map(|m| {
                let mut c = base.clone();
                c.loss.m_inter = m;
                c.loss.m_intra = 0.0;
                (format!("m_inter={m}"), c)
            });
            let intra = INTRA_MARGINS.into_iter().map(|m| {
                let mut c = base.clone();
                c.loss.m_intra = m;
                c.loss.m_inter = 0.0;
                (format!("m_intra={m}"), c)
            });
            inter.chain(intra).collect()
        }
        Axis::Lambda => LAMBDAS
            .into_iter()
            .map(|l| {
                let mut c = base.clone();
                c.loss.lambda = l;
                (format!("lambda={l}"), c)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_rejects_unknown_keys() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"sampling": {"K": 8, "extra": 1}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"dataset": {"kind": "gaussian", "classes": 3, "bogus": 1}}"#).is_err());
        let c = RunConfig::from_json(r#"{"dataset": {"kind": "gaussian", "classes": 3, "seed": 9}}"#).unwrap();
        assert_eq!(c.dataset.split_seed(), 9);
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seeds": []}"#).is_err());
    }

    #[test]
    fn grids_have_expected_shape() {
        let base = TrainConfig::default();
        assert_eq!(ablation_variants(Axis::Sampling, &base).len(), 4);
        assert_eq!(ablation_variants(Axis::Labels, &base).len(), 2);
        let margin = ablation_variants(Axis::Margin, &base);
        assert_eq!(margin.len(), 11);
        assert!(margin.iter().all(|(_, c)| c.loss.m_intra == 0.0 || c.loss.m_inter == 0.0));
        let lambdas: Vec<f64> = ablation_variants(Axis::Lambda, &base).iter().map(|(_, c)| c.loss.lambda).collect();
        assert!(lambdas.contains(&0.0) && lambdas.contains(&1.0));
        assert_eq!("margin".parse::<Axis>().unwrap(), Axis::Margin);
        assert!("depth".parse::<Axis>().is_err());
    }

    #[test]
    fn run_seed_reports_all_metrics() {
        let mut config = RunConfig {
            dataset: DatasetSpec::Gaussian {
                mixture: MixtureSpec { classes: 3, per_class: 30, dim: 6, ..MixtureSpec::default() },
                seed: 2,
            },
            ..RunConfig::default()
        };
        config.train.epochs = 2;
        config.train.batch_size = 16;
        config.train.clusters = 6;
        config.train.sampling.k = 16;
        config.eval.probe_epochs = 20;
        let split = prepare_data(&config).unwrap();
        let mut seen = Vec::new();
        let mut cb = |_: &TrainState, r: &MetricsRecord| {
            seen.push(r.epoch);
            Ok(())
        };
        let result = run_seed(&config, &split, 3, Some(&mut cb)).unwrap();
        assert_eq!(seen, vec![0, 1]);
        let report = result.report.unwrap();
        for v in [report.knn_acc, report.probe_acc, report.nmi] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(report.knn_acc, result.outcome.metrics.last().unwrap().knn_acc);
    }
}
