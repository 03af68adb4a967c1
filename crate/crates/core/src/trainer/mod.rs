//! The training loop: augment, encode, intra- and inter-instance losses, SGD
//! step, memory-bank update and pseudo-label update, once per mini-batch.

mod augment;
mod optim;

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{sample_index_negatives, MemoryBank};
use crate::clustering::{global_kmeans, offline_relabel, ClusterState, CONSISTENCY_TOL};
use crate::encoder::{backward, embed, forward, EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::MetricsRecord;
use crate::loss::{combined_loss, margin_nce_with_grad, LossConfig};
use crate::rng::{substream, Stream};
use crate::sampling::{sample_negatives, sample_negatives_scored, sample_positive_inter, SamplingConfig, Strategy};
use crate::vector::norm;

pub use augment::{augment, augment_view, AugmentConfig, SampleShape};
pub use optim::{lr_at, sgd_step, SgdState};

/// Rows per chunk when embedding a whole dataset.
const EMBED_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Mini-batch k-means every iteration.
    Online,
    /// Global k-means every `offline_cadence_epochs` epochs.
    Offline,
}

/// Hidden widths of the encoder; the input width comes from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderLayout {
    pub backbone: Vec<usize>,
    pub head_hidden: usize,
    pub embed: usize,
}

impl Default for EncoderLayout {
    fn default() -> Self {
        let d = EncoderDims::default();
        Self {
            backbone: d.backbone,
            head_hidden: d.head_hidden,
            embed: d.embed,
        }
    }
}

impl EncoderLayout {
    pub fn with_input(&self, input: usize) -> EncoderDims {
        EncoderDims {
            input,
            backbone: self.backbone.clone(),
            head_hidden: self.head_hidden,
            embed: self.embed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Defaults to `base_lr × 1e-3`.
    pub final_lr: Option<f64>,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub label_mode: LabelMode,
    pub offline_cadence_epochs: usize,
    pub seed: u64,
    /// Memory-bank momentum ω.
    pub omega: f64,
    /// Number of pseudo-label clusters.
    pub clusters: usize,
    pub kmeans_max_iters: usize,
    pub augmentation: AugmentConfig,
    pub encoder: EncoderLayout,
    pub sampling: SamplingConfig,
    pub loss: LossConfig,
    /// Fixed-order reductions; results do not depend on the thread count.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            base_lr: 0.03,
            final_lr: None,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            label_mode: LabelMode::Online,
            offline_cadence_epochs: 5,
            seed: 0,
            omega: 0.5,
            clusters: 50,
            kmeans_max_iters: 100,
            augmentation: AugmentConfig::default(),
            encoder: EncoderLayout::default(),
            sampling: SamplingConfig::default(),
            loss: LossConfig::default(),
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn final_lr(&self) -> f64 {
        self.final_lr.unwrap_or(self.base_lr * 1e-3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0) || !(self.final_lr() >= 0.0) {
            return Err(Error::config("base_lr must be positive and final_lr non-negative"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("sgd_momentum must be in [0, 1) and weight_decay >= 0"));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::config(format!("omega {} outside (0, 1]", self.omega)));
        }
        if self.clusters < 1 || self.kmeans_max_iters < 1 || self.offline_cadence_epochs < 1 {
            return Err(Error::config("clusters, kmeans_max_iters and offline_cadence_epochs must be >= 1"));
        }
        self.augmentation.validate()?;
        self.sampling.validate()?;
        self.loss.validate()?;
        self.encoder.with_input(1).validate()
    }

    /// Checks that depend on the training-set size.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if self.batch_size > n {
            return Err(Error::config(format!("batch_size {} exceeds {n} training samples", self.batch_size)));
        }
        if self.clusters > n {
            return Err(Error::config(format!("{} clusters for {n} training samples", self.clusters)));
        }
        if self.sampling.k > n - 1 {
            return Err(Error::config(format!("sampling.K = {} needs more than {n} training samples", self.sampling.k)));
        }
        Ok(())
    }
}

/// What the trainer sees of the data: samples only, never labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainInput<'a> {
    pub samples: ArrayView2<'a, f32>,
    pub shape: SampleShape,
}

/// Per-iteration telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_intra: f64,
    pub loss_inter: f64,
    pub label_churn: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochEval {
    pub knn_acc: f64,
    pub nmi: f64,
}

/// Everything the loop owns between iterations.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EncoderParams<f32>,
    pub bank: MemoryBank,
    pub clusters: ClusterState,
    pub optimizer: SgdState<f32>,
}

/// Callbacks that give the caller access to labels and persistence without
/// exposing either to the loop.
pub trait EpochHook {
    fn evaluate(&mut self, params: &EncoderParams<f32>, clusters: &ClusterState) -> Result<EpochEval>;

    fn epoch_end(&mut self, _state: &TrainState, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

/// A hook that reports zeros; for runs without labels.
pub struct NoEval;

impl EpochHook for NoEval {
    fn evaluate(&mut self, _: &EncoderParams<f32>, _: &ClusterState) -> Result<EpochEval> {
        Ok(EpochEval { knn_acc: 0.0, nmi: 0.0 })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    pub iterations: Vec<IterationRecord>,
}

/// Embeds every row with the given parameters, chunked.
pub fn embed_all(params: &EncoderParams<f32>, samples: ArrayView2<f32>) -> Result<Array2<f32>> {
    let chunks = samples
        .axis_chunks_iter(Axis(0), EMBED_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|c| embed(params, c))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    if views.is_empty() {
        return Ok(Array2::zeros((0, params.embed_dim())));
    }
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

/// Encoder, bank and pseudo-labels before the first epoch: a forward pass of
/// the untrained encoder over the clean samples, then global k-means.
pub fn initialize(input: &TrainInput, config: &TrainConfig) -> Result<TrainState> {
    let dims = config.encoder.with_input(input.samples.ncols());
    let params = EncoderParams::<f32>::init(&dims, &mut substream(config.seed, Stream::Init, 0, 0))?;
    let features = embed_all(&params, input.samples)?;
    let bank = MemoryBank::new(features.view(), config.omega as f32)?;
    let clusters = global_kmeans(
        &bank,
        config.clusters,
        config.kmeans_max_iters,
        0.0,
        &mut substream(config.seed, Stream::Cluster, 0, 0),
    )?;
    let optimizer = SgdState::new(&params);
    Ok(TrainState { params, bank, clusters, optimizer })
}

struct AnchorResult {
    intra: f64,
    inter: f64,
    grad: ndarray::Array1<f32>,
}

/// Both loss terms and the combined anchor gradient for batch row `pos`.
fn anchor_terms(
    pos: usize,
    anchor: usize,
    embeddings: &Array2<f32>,
    similarities: Option<ndarray::ArrayView1<f64>>,
    state: &TrainState,
    config: &TrainConfig,
    iteration: u64,
) -> Result<AnchorResult> {
    let seed = config.seed;
    let bank = &state.bank;
    let k = config.sampling.k;
    let tau = config.loss.tau as f32;
    let lambda = config.loss.lambda as f32;
    let v = embeddings.row(pos);
    let a = anchor as u64;

    let mut rng = substream(seed, Stream::IntraNegatives, iteration, a);
    let negatives = bank.read_rows(&sample_index_negatives(bank, anchor, k, &mut rng)?)?;
    let stored = ndarray::ArrayView1::from(bank.row(anchor));
    let (intra, g_intra) = margin_nce_with_grad(v, stored, negatives.view(), tau, config.loss.m_intra as f32)?;

    let mut rng = substream(seed, Stream::InterPositive, iteration, a);
    let positive = sample_positive_inter(anchor, &state.clusters, &mut rng)?;
    let mut rng = substream(seed, Stream::InterNegatives, iteration, a);
    let sampled = match similarities {
        Some(sims) => sample_negatives_scored(
            anchor,
            sims.as_slice().expect("contiguous similarities"),
            &state.clusters,
            &config.sampling,
            &mut rng,
        ),
        None => sample_negatives(anchor, bank, &state.clusters, &config.sampling, &mut rng),
    };
    let negative_ids = match sampled {
        Ok(ids) => ids,
        // Only one pseudo-class: fall back to instance negatives.
        Err(Error::NoNegatives(_)) => sample_index_negatives(bank, anchor, k, &mut rng)?,
        Err(e) => return Err(e),
    };
    let negatives = bank.read_rows(&negative_ids)?;
    let positive = ndarray::ArrayView1::from(bank.row(positive));
    let (inter, g_inter) = margin_nce_with_grad(v, positive, negatives.view(), tau, config.loss.m_inter as f32)?;

    let scale = 1.0 / embeddings.nrows() as f32;
    let grad = (g_intra * lambda + g_inter * (1.0 - lambda)) * scale;
    Ok(AnchorResult {
        intra: intra as f64,
        inter: inter as f64,
        grad,
    })
}

/// Similarity of each batch member's stored feature to every bank row, or
/// `None` when the strategy does not rank candidates.
fn batch_similarities(bank: &MemoryBank, batch: &[usize], strategy: Strategy) -> Option<Array2<f64>> {
    if strategy == Strategy::Random {
        return None;
    }
    let all = bank.features().mapv(f64::from);
    let anchors = all.select(Axis(0), batch);
    Some(anchors.dot(&all.t()))
}

fn check_epoch_invariants(state: &TrainState) -> Result<()> {
    for i in 0..state.bank.len() {
        let n = norm(state.bank.row(i));
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidState(format!("bank row {i} has norm {n}")));
        }
    }
    state.clusters.check_consistency(&state.bank, CONSISTENCY_TOL)
}

/// Runs the full schedule. Emits one [`MetricsRecord`] per epoch and one
/// [`IterationRecord`] per iteration.
pub fn train(input: TrainInput, config: &TrainConfig, hook: &mut dyn EpochHook) -> Result<TrainOutcome> {
    let n = input.samples.nrows();
    if n == 0 {
        return Err(Error::config("empty training set"));
    }
    config.validate_for(n)?;
    if let SampleShape::Image { rows, cols } = input.shape {
        if rows * cols != input.samples.ncols() {
            return Err(Error::shape("image shape does not match sample width"));
        }
    }
    let mut state = initialize(&input, config)?;
    let iters_per_epoch = n.div_ceil(config.batch_size);
    let total = (config.epochs * iters_per_epoch) as u64;
    let final_lr = config.final_lr();
    let lambda = config.loss.lambda;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut iterations = Vec::with_capacity(total as usize);
    let mut t: u64 = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(config.seed, Stream::Permute, epoch as u64, 0));
        let mut sums = [0.0f64; 4]; // total, intra, inter, churn
        let mut lr = config.base_lr;

        for batch in order.chunks(config.batch_size) {
            lr = lr_at(t, total, config.base_lr, final_lr)?;
            let d_in = input.samples.ncols();
            let rows: Vec<Vec<f32>> = batch
                .par_iter()
                .map(|&i| {
                    let sample = input.samples.row(i);
                    augment_view(
                        sample.as_slice().expect("contiguous samples"),
                        input.shape,
                        &config.augmentation,
                        config.seed,
                        i,
                        epoch,
                        0,
                    )
                })
                .collect();
            let views = Array2::from_shape_vec((batch.len(), d_in), rows.concat())
                .map_err(|e| Error::shape(e.to_string()))?;
            let (embeddings, cache) = forward(&state.params, views.view())?;

            let similarities = batch_similarities(&state.bank, batch, config.sampling.strategy);
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &anchor)| {
                    let sims = similarities.as_ref().map(|s| s.row(pos));
                    anchor_terms(pos, anchor, &embeddings, sims, &state, config, t)
                })
                .collect::<Result<Vec<_>>>()?;

            let (intra_sum, inter_sum) = if config.deterministic {
                results.iter().fold((0.0, 0.0), |(a, b), r| (a + r.intra, b + r.inter))
            } else {
                results
                    .par_iter()
                    .map(|r| (r.intra, r.inter))
                    .reduce(|| (0.0, 0.0), |(a, b), (c, d)| (a + c, b + d))
            };
            let loss_intra = intra_sum / batch.len() as f64;
            let loss_inter = inter_sum / batch.len() as f64;
            let loss_total = combined_loss(loss_intra, loss_inter, lambda);
            if !loss_total.is_finite() || !loss_intra.is_finite() || !loss_inter.is_finite() {
                return Err(Error::numeric(format!("non-finite loss at iteration {t}")));
            }

            let mut grad = Array2::<f32>::zeros(embeddings.dim());
            for (mut row, r) in grad.outer_iter_mut().zip(&results) {
                row.assign(&r.grad);
            }
            let grads = backward(&state.params, &cache, grad.view())?;
            sgd_step(
                &mut state.params,
                &grads,
                &mut state.optimizer,
                lr as f32,
                config.sgd_momentum as f32,
                config.weight_decay as f32,
            )?;
            state.bank.momentum_update(batch, embeddings.view())?;

            let churn = match config.label_mode {
                LabelMode::Online => {
                    let mut rng = substream(config.seed, Stream::Repair, t, 0);
                    state.clusters.minibatch_update(batch, &state.bank, &mut rng)?.churn
                }
                LabelMode::Offline => {
                    state.clusters.track_features(batch, &state.bank)?;
                    0.0
                }
            };

            iterations.push(IterationRecord {
                iteration: t,
                epoch,
                lr,
                loss_total,
                loss_intra,
                loss_inter,
                label_churn: churn,
            });
            sums[0] += loss_total;
            sums[1] += loss_intra;
            sums[2] += loss_inter;
            sums[3] += churn;
            t += 1;
        }

        let mut label_churn = sums[3] / iters_per_epoch as f64;
        if config.label_mode == LabelMode::Offline && (epoch + 1) % config.offline_cadence_epochs == 0 {
            let fresh = offline_relabel(
                &state.bank,
                config.clusters,
                config.kmeans_max_iters,
                &mut substream(config.seed, Stream::Offline, epoch as u64, 0),
            )?;
            let changed = fresh
                .labels()
                .iter()
                .zip(state.clusters.labels())
                .filter(|(a, b)| a != b)
                .count();
            label_churn = changed as f64 / n as f64;
            state.clusters = fresh;
        }

        check_epoch_invariants(&state)?;
        let eval = hook.evaluate(&state.params, &state.clusters)?;
        let m = iters_per_epoch as f64;
        let record = MetricsRecord {
            epoch,
            lr,
            loss_total: sums[0] / m,
            loss_intra: sums[1] / m,
            loss_inter: sums[2] / m,
            label_churn,
            knn_acc: eval.knn_acc,
            nmi: eval.nmi,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        record.check_ranges()?;
        hook.epoch_end(&state, &record)?;
        metrics.push(record);
    }
    Ok(TrainOutcome { state, metrics, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_mixture, MixtureSpec};
    use crate::rng::seeded;

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            clusters: 6,
            sampling: SamplingConfig { k: 16, ..SamplingConfig::default() },
            encoder: EncoderLayout { backbone: vec![16], head_hidden: 16, embed: 8 },
            ..TrainConfig::default()
        }
    }

    fn small_data() -> crate::data::Dataset {
        let spec = MixtureSpec { classes: 3, per_class: 20, dim: 6, ..MixtureSpec::default() };
        gen_gaussian_mixture(&spec, &mut seeded(1)).unwrap()
    }

    #[test]
    fn config_defaults_follow_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.epochs, c.base_lr, c.sgd_momentum, c.weight_decay), (128, 50, 0.03, 0.9, 1e-4));
        assert_eq!(c.omega, 0.5);
        assert_eq!(c.final_lr(), 0.03 * 1e-3);
        assert_eq!(c.label_mode, LabelMode::Online);
        assert_eq!(c.sampling.strategy, crate::Strategy::SemiHard);
        c.validate().unwrap();
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "bogus": 1}"#).is_err());
    }

    #[test]
    fn validation_against_dataset_size() {
        let c = small_config();
        assert!(c.validate_for(10).is_err()); // batch 16 > 10
        assert!(c.validate_for(60).is_ok());
        assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { omega: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn runs_and_is_deterministic() {
        let data = small_data();
        let input = TrainInput { samples: data.samples.view(), shape: data.shape };
        let a = train(input, &small_config(), &mut NoEval).unwrap();
        let b = train(input, &small_config(), &mut NoEval).unwrap();
        assert_eq!(a.metrics.len(), 2);
        assert_eq!(a.iterations.len(), 2 * 4);
        assert_eq!(a.state.params, b.state.params);
        assert_eq!(a.iterations, b.iterations);
        assert!(a.iterations.iter().all(|r| r.loss_total.is_finite() && (0.0..=1.0).contains(&r.label_churn)));
    }

    #[test]
    fn lambda_one_logs_intra_only() {
        let data = small_data();
        let input = TrainInput { samples: data.samples.view(), shape: data.shape };
        let mut cfg = small_config();
        cfg.loss.lambda = 1.0;
        let out = train(input, &cfg, &mut NoEval).unwrap();
        assert!(out.iterations.iter().all(|r| r.loss_total == r.loss_intra));
    }

    #[test]
    fn offline_mode_runs() {
        let data = small_data();
        let input = TrainInput { samples: data.samples.view(), shape: data.shape };
        let mut cfg = small_config();
        cfg.label_mode = LabelMode::Offline;
        cfg.offline_cadence_epochs = 1;
        let out = train(input, &cfg, &mut NoEval).unwrap();
        assert!(out.iterations.iter().all(|r| r.label_churn == 0.0));
    }
}
