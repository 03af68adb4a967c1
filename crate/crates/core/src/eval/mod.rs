//! Representation-quality measurements: kNN accuracy, linear probe, NMI,
//! 2-D PCA projection and nearest-neighbor dumps.

mod nmi;
mod pca;
mod probe;

use std::cmp::Ordering;

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::sampling::order_key;
use crate::vector::{dot, norm};

pub use nmi::nmi;
pub use pca::{pca_2d, symmetric_eigen};
pub use probe::linear_probe;

/// One epoch of training telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_intra: f64,
    pub loss_inter: f64,
    pub label_churn: f64,
    pub knn_acc: f64,
    pub nmi: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn check_ranges(&self) -> Result<()> {
        for (name, v) in [("label_churn", self.label_churn), ("knn_acc", self.knn_acc), ("nmi", self.nmi)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidState(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Rows of `rows` ranked by cosine similarity to `query`, most similar first,
/// ties to the lowest index; only the first `take` are kept.
pub fn rank_by_cosine(query: &[f32], rows: ArrayView2<f32>, take: usize) -> Vec<(usize, f64)> {
    rank_with_norms(query, rows, &row_norms(rows), take)
}

fn row_norms(rows: ArrayView2<f32>) -> Vec<f64> {
    rows.outer_iter().map(|r| norm(r.as_slice().expect("contiguous rows"))).collect()
}

fn rank_with_norms(query: &[f32], rows: ArrayView2<f32>, norms: &[f64], take: usize) -> Vec<(usize, f64)> {
    let qn = norm(query);
    let mut scored: Vec<(usize, f64)> = rows
        .outer_iter()
        .zip(norms)
        .enumerate()
        .map(|(j, (r, &rn))| {
            let denom = qn * rn;
            let c = if denom > 0.0 { dot(query, r.as_slice().expect("contiguous rows")) / denom } else { 0.0 };
            (j, c)
        })
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0));
    let take = take.min(scored.len());
    if take == 0 {
        return Vec::new();
    }
    if take < scored.len() {
        scored.select_nth_unstable_by(take - 1, cmp);
        scored.truncate(take);
    }
    scored.sort_unstable_by(cmp);
    scored
}

/// Query rows per similarity block in [`knn_accuracy`].
const QUERY_CHUNK: usize = 256;

/// The `take` highest similarities, descending, ties to the lowest index.
fn top_k(sims: impl Iterator<Item = f64>, take: usize) -> Vec<(usize, f64)> {
    let mut keyed: Vec<(u128, f64)> = sims
        .enumerate()
        .map(|(j, s)| ((((!order_key(s)) as u128) << 64) | j as u128, s))
        .collect();
    let take = take.min(keyed.len());
    if take == 0 {
        return Vec::new();
    }
    if take < keyed.len() {
        keyed.select_nth_unstable_by_key(take - 1, |e| e.0);
        keyed.truncate(take);
    }
    keyed.sort_unstable_by_key(|e| e.0);
    keyed.into_iter().map(|(key, s)| (key as u64 as usize, s)).collect()
}

fn check_labeled(emb: ArrayView2<f32>, labels: &[usize], what: &str) -> Result<()> {
    if emb.nrows() != labels.len() {
        return Err(Error::shape(format!("{what}: {} embeddings but {} labels", emb.nrows(), labels.len())));
    }
    Ok(())
}

/// Majority label among the ranked neighbors; ties go to the tied label whose
/// best-ranked neighbor comes first.
fn vote(ranked: &[(usize, f64)], labels: &[usize]) -> usize {
    let mut tally: Vec<(usize, usize, usize)> = Vec::new(); // (label, votes, first rank)
    for (rank, &(j, _)) in ranked.iter().enumerate() {
        let l = labels[j];
        match tally.iter_mut().find(|t| t.0 == l) {
            Some(t) => t.1 += 1,
            None => tally.push((l, 1, rank)),
        }
    }
    tally
        .into_iter()
        .min_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)))
        .map(|t| t.0)
        .expect("at least one neighbor")
}

/// Fraction of test points whose cosine kNN vote recovers their label.
pub fn knn_accuracy(
    train: ArrayView2<f32>,
    train_labels: &[usize],
    test: ArrayView2<f32>,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    check_labeled(train, train_labels, "train")?;
    check_labeled(test, test_labels, "test")?;
    if k == 0 {
        return Err(Error::config("kNN needs k >= 1"));
    }
    if train.nrows() == 0 {
        return Err(Error::config("kNN needs a nonempty training set"));
    }
    if test.nrows() == 0 {
        return Err(Error::config("kNN needs a nonempty test set"));
    }
    if train.ncols() != test.ncols() {
        return Err(Error::shape("train and test embeddings differ in width"));
    }
    let norms = row_norms(train);
    let train64 = train.mapv(f64::from);
    let mut hits = 0usize;
    for (c, chunk) in test.axis_chunks_iter(Axis(0), QUERY_CHUNK).enumerate() {
        let dots = chunk.mapv(f64::from).dot(&train64.t());
        let chunk_hits: Vec<bool> = (0..chunk.nrows())
            .into_par_iter()
            .map(|r| {
                let qn = norm(chunk.row(r).as_slice().expect("contiguous"));
                let row = dots.row(r);
                let sims = row.iter().zip(&norms).map(|(&d, &n)| {
                    let denom = qn * n;
                    if denom > 0.0 {
                        d / denom
                    } else {
                        0.0
                    }
                });
                let ranked = top_k(sims, k);
                vote(&ranked, train_labels) == test_labels[c * QUERY_CHUNK + r]
            })
            .collect();
        hits += chunk_hits.into_iter().filter(|&h| h).count();
    }
    Ok(hits as f64 / test.nrows() as f64)
}

/// Exact top-`top_n` bank rows by cosine similarity for each query.
pub fn nearest_neighbor_dump(
    queries: ArrayView2<f32>,
    bank: &MemoryBank,
    top_n: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if top_n > bank.len() {
        return Err(Error::InsufficientPopulation { requested: top_n, available: bank.len() });
    }
    if queries.ncols() != bank.dim() {
        return Err(Error::shape("query width differs from bank dimension"));
    }
    let norms = row_norms(bank.features());
    Ok((0..queries.nrows())
        .into_par_iter()
        .map(|q| rank_with_norms(queries.row(q).as_slice().expect("contiguous"), bank.features(), &norms, top_n))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn exact_match_with_k_one() {
        let train = array![[1.0f32, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let test = array![[0.0f32, 1.0]];
        assert_eq!(knn_accuracy(train.view(), &[0, 1, 2], test.view(), &[1], 1).unwrap(), 1.0);
        assert_eq!(knn_accuracy(train.view(), &[0, 1, 2], test.view(), &[2], 1).unwrap(), 0.0);
    }

    #[test]
    fn constant_training_labels() {
        let train = Array2::from_shape_fn((6, 3), |(i, j)| (i + j) as f32 + 0.5);
        let test = Array2::from_shape_fn((5, 3), |(i, j)| (i * j) as f32 + 1.0);
        let acc = knn_accuracy(train.view(), &[4; 6], test.view(), &[4, 1, 4, 0, 4], 3).unwrap();
        assert_eq!(acc, 0.6);
    }

    #[test]
    fn vote_ties_follow_nearest() {
        // Two votes each for labels 7 and 3; label 3 owns the nearest neighbor.
        let ranked = [(0, 0.9), (1, 0.8), (2, 0.7), (3, 0.6)];
        assert_eq!(vote(&ranked, &[3, 7, 7, 3]), 3);
        assert_eq!(vote(&ranked, &[3, 7, 7, 7]), 7);
    }

    #[test]
    fn knn_errors() {
        let e = Array2::<f32>::zeros((0, 2));
        let t = array![[1.0f32, 0.0]];
        assert!(knn_accuracy(t.view(), &[0], e.view(), &[], 1).is_err());
        assert!(knn_accuracy(e.view(), &[], t.view(), &[0], 1).is_err());
        assert!(knn_accuracy(t.view(), &[0], t.view(), &[0], 0).is_err());
    }

    #[test]
    fn dump_self_match_and_full_ranking() {
        let rows = array![[1.0f32, 0.0], [0.6, 0.8], [0.0, 1.0], [-1.0, 0.0]];
        let bank = MemoryBank::new(rows.view(), 0.5).unwrap();
        let q = array![[0.6f32, 0.8]];
        let d = nearest_neighbor_dump(q.view(), &bank, 4).unwrap();
        assert_eq!(d[0][0].0, 1);
        assert!((d[0][0].1 - 1.0).abs() < 1e-7);
        let ids: Vec<usize> = d[0].iter().map(|p| p.0).collect();
        assert_eq!(ids, vec![1, 2, 0, 3]);
        assert!(nearest_neighbor_dump(q.view(), &bank, 5).is_err());
    }

    #[test]
    fn record_range_check() {
        let mut r = MetricsRecord {
            epoch: 0,
            lr: 0.1,
            loss_total: 1.0,
            loss_intra: 1.0,
            loss_inter: 1.0,
            label_churn: 0.5,
            knn_acc: 0.9,
            nmi: 0.3,
            wall_ms: 1,
        };
        r.check_ranges().unwrap();
        r.nmi = 1.2;
        assert!(r.check_ranges().is_err());
    }
}
