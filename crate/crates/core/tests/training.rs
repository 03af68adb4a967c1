use iclr_core::checkpoint::Checkpoint;
use iclr_core::data::{gen_gaussian_mixture, Dataset, MixtureSpec};
use iclr_core::encoder::{backward, forward, EncoderDims, EncoderParams};
use iclr_core::error::Error;
use iclr_core::eval::{knn_accuracy, pca_2d};
use iclr_core::loss::margin_nce_with_grad;
use iclr_core::rng::seeded;
use iclr_core::trainer::{embed_all, train, EpochEval, EpochHook, LabelMode, NoEval, TrainConfig, TrainInput};
use iclr_core::{ClusterState, EncoderParams as Params};
use ndarray::{Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

fn small_data() -> Dataset {
    let spec = MixtureSpec { classes: 3, per_class: 40, dim: 6, ..MixtureSpec::default() };
    gen_gaussian_mixture(&spec, &mut seeded(11)).unwrap()
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig { epochs: 3, batch_size: 24, clusters: 8, seed: 5, ..TrainConfig::default() };
    cfg.sampling.k = 16;
    cfg.encoder.backbone = vec![32];
    cfg.encoder.head_hidden = 16;
    cfg.encoder.embed = 8;
    cfg
}

fn input(data: &Dataset) -> TrainInput<'_> {
    TrainInput { samples: data.samples.view(), shape: data.shape }
}

#[test]
fn training_is_reproducible_and_keeps_the_bank_on_the_sphere() {
    let data = small_data();
    let cfg = small_config();
    let a = train(input(&data), &cfg, &mut NoEval).unwrap();
    let b = train(input(&data), &cfg, &mut NoEval).unwrap();
    assert_eq!(a.iterations, b.iterations);
    assert_eq!(a.state.params, b.state.params);
    assert_eq!(a.state.clusters.labels(), b.state.clusters.labels());
    assert_eq!(a.metrics.len(), cfg.epochs);
    assert_eq!(a.iterations.len(), cfg.epochs * 5);

    for i in 0..a.state.bank.len() {
        let n: f64 = a.state.bank.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    for r in &a.iterations {
        assert!(r.loss_total.is_finite() && (0.0..=1.0).contains(&r.label_churn));
    }
    let lrs: Vec<f64> = a.iterations.iter().map(|r| r.lr).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]), "cosine schedule must not increase");
}

#[test]
fn different_seeds_give_different_runs() {
    let data = small_data();
    let cfg = small_config();
    let other = TrainConfig { seed: 6, ..cfg.clone() };
    let a = train(input(&data), &cfg, &mut NoEval).unwrap();
    let b = train(input(&data), &other, &mut NoEval).unwrap();
    assert_ne!(a.state.params, b.state.params);
}

#[test]
fn offline_mode_reports_epoch_churn_only_at_relabels() {
    let data = small_data();
    let cfg = TrainConfig { label_mode: LabelMode::Offline, offline_cadence_epochs: 2, epochs: 4, ..small_config() };
    let out = train(input(&data), &cfg, &mut NoEval).unwrap();
    assert!(out.iterations.iter().all(|r| r.label_churn == 0.0));
    assert_eq!(out.metrics[0].label_churn, 0.0);
    assert_eq!(out.metrics[2].label_churn, 0.0);
}

struct Recorder {
    seen: Vec<usize>,
    fail_at: Option<usize>,
}

impl EpochHook for Recorder {
    fn evaluate(&mut self, _: &Params<f32>, clusters: &ClusterState) -> iclr_core::Result<EpochEval> {
        self.seen.push(clusters.len());
        if self.fail_at == Some(self.seen.len()) {
            return Err(Error::Config("stop".into()));
        }
        Ok(EpochEval { knn_acc: 0.5, nmi: 0.25 })
    }
}

#[test]
fn hooks_see_every_epoch_and_can_abort() {
    let data = small_data();
    let cfg = small_config();
    let mut hook = Recorder { seen: Vec::new(), fail_at: None };
    let out = train(input(&data), &cfg, &mut hook).unwrap();
    assert_eq!(hook.seen, vec![data.len(); cfg.epochs]);
    assert!(out.metrics.iter().all(|m| m.knn_acc == 0.5 && m.nmi == 0.25));

    let mut hook = Recorder { seen: Vec::new(), fail_at: Some(2) };
    assert!(train(input(&data), &cfg, &mut hook).is_err());
}

#[test]
fn trained_state_survives_a_checkpoint() {
    let data = small_data();
    let out = train(input(&data), &small_config(), &mut NoEval).unwrap();
    let ckpt = Checkpoint {
        epochs_done: 3,
        params: out.state.params.clone(),
        bank: out.state.bank.clone(),
        clusters: out.state.clusters.clone(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.epochs_done, 3);
    assert_eq!(back.params, out.state.params);
    assert_eq!(back.bank.features(), out.state.bank.features());
    assert_eq!(back.clusters.labels(), out.state.clusters.labels());

    // The restored encoder embeds identically.
    let e1 = embed_all(&out.state.params, data.samples.view()).unwrap();
    let e2 = embed_all(&back.params, data.samples.view()).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn learned_embeddings_separate_the_mixture() {
    let data = small_data();
    let labels = data.true_labels.clone().unwrap();
    let cfg = TrainConfig { epochs: 10, ..small_config() };
    let out = train(input(&data), &cfg, &mut NoEval).unwrap();
    let emb = embed_all(&out.state.params, data.samples.view()).unwrap();
    let (train_rows, test_rows) = emb.view().split_at(Axis(0), 90);
    let acc = knn_accuracy(train_rows, &labels[..90], test_rows, &labels[90..], 5).unwrap();
    assert!(acc >= 0.9, "kNN accuracy {acc}");
}

#[test]
fn encoder_gradient_matches_central_differences_through_the_loss() {
    let dims = EncoderDims { input: 4, backbone: vec![12], head_hidden: 10, embed: 6 };
    let mut rng = seeded(77);
    let params = EncoderParams::<f64>::init(&dims, &mut rng).unwrap();
    let x = Array2::from_shape_fn((2, 4), |_| rng.sample::<f64, _>(StandardNormal));
    let unit = |rng: &mut iclr_core::rng::Rng, rows: usize| {
        let mut m = Array2::from_shape_fn((rows, 6), |_| rng.sample::<f64, _>(StandardNormal));
        for mut r in m.outer_iter_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    };
    let positives = unit(&mut rng, 2);
    let negatives = unit(&mut rng, 5);
    let loss = |p: &EncoderParams<f64>| -> f64 {
        let (emb, _) = forward(p, x.view()).unwrap();
        emb.outer_iter()
            .enumerate()
            .map(|(i, v)| margin_nce_with_grad(v, positives.row(i), negatives.view(), 0.1, -0.5).unwrap().0)
            .sum::<f64>()
            / 2.0
    };
    let (emb, cache) = forward(&params, x.view()).unwrap();
    let mut upstream = Array2::zeros(emb.dim());
    for (i, v) in emb.outer_iter().enumerate() {
        let (_, g) = margin_nce_with_grad(v, positives.row(i), negatives.view(), 0.1, -0.5).unwrap();
        upstream.row_mut(i).assign(&(g / 2.0));
    }
    let grads = backward(&params, &cache, upstream.view()).unwrap();
    let h = 1e-6;
    let mut probe = params.clone();
    for (t, g) in grads.tensors().iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[t][i] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - g[i]).abs() <= 1e-5 * (1.0 + numeric.abs()), "tensor {t}[{i}]: {} vs {numeric}", g[i]);
        }
    }
}

#[test]
fn pca_axes_agree_with_a_full_eigendecomposition() {
    let mut rng = seeded(8);
    // Anisotropic cloud so the two leading directions are well separated.
    let scales = [3.0f32, 2.0, 0.5, 0.2];
    let x = Array2::from_shape_fn((200, 4), |(_, c)| scales[c] * rng.sample::<f32, _>(StandardNormal));
    let coords = pca_2d(x.view()).unwrap();

    let xf = x.mapv(f64::from);
    let centered = &xf - &xf.mean_axis(Axis(0)).unwrap();
    let cov = centered.t().dot(&centered) / 200.0;
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(4, 4, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (c, &idx) in order[..2].iter().enumerate() {
        let axis = eig.eigenvectors.column(idx);
        let proj: Vec<f64> = centered.outer_iter().map(|r| r.iter().zip(axis.iter()).map(|(a, b)| a * b).sum()).collect();
        let sign = if coords[[0, c]] * proj[0] >= 0.0 { 1.0 } else { -1.0 };
        for (got, want) in coords.column(c).iter().zip(&proj) {
            assert!((got - sign * want).abs() < 1e-6);
        }
    }
}
