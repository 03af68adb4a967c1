//! Pseudo-label maintenance: global k-means initialization and mini-batch
//! k-means updates folded into every training iteration.
//!
//! Distances are squared Euclidean against unnormalized centroids. Each
//! cluster keeps a running feature sum and member count so that a batch
//! update only touches the clusters its instances leave or join.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rayon::prelude::*;

use crate::bank::{truncated, MemoryBank};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vector::squared_distance;

/// Tolerance for centroid/sum consistency checks.
pub const CONSISTENCY_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    labels: Vec<usize>,
    centroids: Array2<f32>,
    sums: Array2<f64>,
    counts: Vec<u64>,
    /// Feature each instance currently contributes to its cluster sum.
    contributed: Array2<f32>,
}

/// Outcome of one mini-batch update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchUpdate {
    /// Fraction of batch instances whose label changed, in `[0, 1]`.
    pub churn: f64,
    /// Number of empty clusters repaired afterwards.
    pub repaired: usize,
}

impl ClusterState {
    /// Builds consistent sums, counts and centroids from a labeling of the bank.
    ///
    /// Empty clusters keep a zero centroid; call [`ClusterState::handle_empty_clusters`]
    /// to repopulate them.
    pub fn from_labels(bank: &MemoryBank, labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.len() != bank.len() {
            return Err(Error::shape(format!("{} labels for {} bank rows", labels.len(), bank.len())));
        }
        if k == 0 {
            return Err(Error::config("cluster count must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::config(format!("label {bad} not below k = {k}")));
        }
        let d = bank.dim();
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0u64; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &x) in sums.row_mut(l).iter_mut().zip(bank.row(i)) {
                *s += x as f64;
            }
        }
        let mut state = Self {
            labels,
            centroids: Array2::zeros((k, d)),
            sums,
            counts,
            contributed: bank.features().to_owned(),
        };
        for j in 0..k {
            state.refresh_centroid(j);
        }
        Ok(state)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, instance: usize) -> usize {
        self.labels[instance]
    }

    pub fn centroids(&self) -> ArrayView2<'_, f32> {
        self.centroids.view()
    }

    pub fn sums(&self) -> ArrayView2<'_, f64> {
        self.sums.view()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    fn refresh_centroid(&mut self, j: usize) {
        let c = self.counts[j];
        if c == 0 {
            return;
        }
        let c = c as f64;
        for (dst, &s) in self.centroids.row_mut(j).iter_mut().zip(self.sums.row(j)) {
            *dst = (s / c) as f32;
        }
    }

    fn move_contribution(&mut self, instance: usize, to: usize, feature: &[f32]) {
        let from = self.labels[instance];
        if from == to {
            let mut sum = self.sums.row_mut(to);
            for ((s, &new), &old) in sum.iter_mut().zip(feature).zip(self.contributed.row(instance)) {
                *s += new as f64 - old as f64;
            }
        } else {
            for (s, &old) in self.sums.row_mut(from).iter_mut().zip(self.contributed.row(instance)) {
                *s -= old as f64;
            }
            for (s, &new) in self.sums.row_mut(to).iter_mut().zip(feature) {
                *s += new as f64;
            }
            self.counts[from] -= 1;
            self.counts[to] += 1;
            self.labels[instance] = to;
        }
        self.contributed
            .row_mut(instance)
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(feature);
    }

    /// Reassigns each batch instance to its nearest centroid using its current
    /// bank feature, updates sums and counts incrementally, recomputes the
    /// affected centroids and finally repairs empty clusters.
    pub fn minibatch_update(&mut self, indices: &[usize], bank: &MemoryBank, rng: &mut Rng) -> Result<BatchUpdate> {
        self.check_bank(bank)?;
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfRange { index: i, len: self.len() });
            }
        }
        if indices.is_empty() {
            return Ok(BatchUpdate { churn: 0.0, repaired: 0 });
        }
        let assignments = indices
            .iter()
            .map(|&i| assign_nearest_centroid(bank.row(i), self).map(|(l, _)| l))
            .collect::<Result<Vec<_>>>()?;

        let mut affected = BTreeSet::new();
        let mut changed = 0usize;
        for (&i, &to) in indices.iter().zip(&assignments) {
            let from = self.labels[i];
            let feature = bank.row(i);
            if from != to {
                changed += 1;
                affected.insert(from);
                affected.insert(to);
                self.move_contribution(i, to, feature);
            } else if feature != self.contributed.row(i).as_slice().expect("contiguous") {
                affected.insert(to);
                self.move_contribution(i, to, feature);
            }
        }
        for j in affected {
            self.refresh_centroid(j);
        }
        let repaired = self.handle_empty_clusters(bank, rng)?;
        Ok(BatchUpdate {
            churn: changed as f64 / indices.len() as f64,
            repaired,
        })
    }

    /// Folds the current bank features of `indices` into their clusters'
    /// sums and centroids without reassigning any label.
    pub fn track_features(&mut self, indices: &[usize], bank: &MemoryBank) -> Result<()> {
        self.check_bank(bank)?;
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfRange { index: i, len: self.len() });
            }
        }
        let mut affected = BTreeSet::new();
        for &i in indices {
            let feature = bank.row(i);
            if feature != self.contributed.row(i).as_slice().expect("contiguous") {
                let l = self.labels[i];
                affected.insert(l);
                self.move_contribution(i, l, feature);
            }
        }
        for j in affected {
            self.refresh_centroid(j);
        }
        Ok(())
    }

    /// Gives every empty cluster one member taken at random from the current
    /// largest cluster. Returns the number of clusters repaired.
    pub fn handle_empty_clusters(&mut self, bank: &MemoryBank, rng: &mut Rng) -> Result<usize> {
        self.check_bank(bank)?;
        let mut repaired = 0;
        for empty in 0..self.k() {
            if self.counts[empty] != 0 {
                continue;
            }
            let largest = argmax_lowest(&self.counts);
            if self.counts[largest] < 2 {
                return Err(Error::InvalidState(format!(
                    "cannot repair empty cluster {empty}: largest cluster has {} member(s)",
                    self.counts[largest]
                )));
            }
            let pick = rng.random_range(0..self.counts[largest] as usize);
            let member = self
                .labels
                .iter()
                .enumerate()
                .filter(|&(_, &l)| l == largest)
                .nth(pick)
                .map(|(i, _)| i)
                .expect("count matches labels");
            for (s, &old) in self.sums.row_mut(largest).iter_mut().zip(self.contributed.row(member)) {
                *s -= old as f64;
            }
            self.counts[largest] -= 1;
            self.refresh_centroid(largest);

            let feature = bank.row(member);
            for (s, &x) in self.sums.row_mut(empty).iter_mut().zip(feature) {
                *s = x as f64;
            }
            self.counts[empty] = 1;
            self.labels[member] = empty;
            self.contributed
                .row_mut(member)
                .as_slice_mut()
                .expect("contiguous")
                .copy_from_slice(feature);
            self.refresh_centroid(empty);
            repaired += 1;
        }
        Ok(repaired)
    }

    fn check_bank(&self, bank: &MemoryBank) -> Result<()> {
        if bank.len() != self.len() || bank.dim() != self.centroids.ncols() {
            return Err(Error::shape(format!(
                "cluster state for {}x{} used with a {}x{} bank",
                self.len(),
                self.centroids.ncols(),
                bank.len(),
                bank.dim()
            )));
        }
        Ok(())
    }

    /// Recomputes sums and counts from scratch and compares them with the
    /// maintained state.
    pub fn check_consistency(&self, bank: &MemoryBank, tol: f64) -> Result<()> {
        self.check_bank(bank)?;
        let fresh = ClusterState::from_labels(bank, self.labels.clone(), self.k())?;
        if fresh.counts != self.counts {
            return Err(Error::InvalidState("cluster counts disagree with labels".into()));
        }
        let total: u64 = self.counts.iter().sum();
        if total as usize != self.len() {
            return Err(Error::InvalidState(format!("counts sum to {total}, expected {}", self.len())));
        }
        for j in 0..self.k() {
            let worst_sum = fresh
                .sums
                .row(j)
                .iter()
                .zip(self.sums.row(j))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if worst_sum > tol {
                return Err(Error::InvalidState(format!("cluster {j} sum drifted by {worst_sum}")));
            }
            if self.counts[j] > 0 {
                let c = self.counts[j] as f64;
                let worst = self
                    .centroids
                    .row(j)
                    .iter()
                    .zip(self.sums.row(j))
                    .map(|(&m, &s)| (m as f64 - s / c).abs())
                    .fold(0.0, f64::max);
                if worst > tol {
                    return Err(Error::InvalidState(format!("centroid {j} off its mean by {worst}")));
                }
            }
        }
        Ok(())
    }

    /// Checkpoint segment: k, labels, centroids, counts.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_u32::<LittleEndian>(self.k() as u32)?;
        for &l in &self.labels {
            w.write_u32::<LittleEndian>(l as u32)?;
        }
        for &x in self.centroids.iter() {
            w.write_f32::<LittleEndian>(x)?;
        }
        for &c in &self.counts {
            w.write_u64::<LittleEndian>(c)?;
        }
        Ok(())
    }

    /// Reads a segment for the given bank. Sums are rebuilt from the bank rows.
    pub fn read_from<R: Read>(r: &mut R, bank: &MemoryBank) -> Result<Self> {
        let k = r.read_u32::<LittleEndian>().map_err(truncated("cluster k"))? as usize;
        if k == 0 || k > bank.len() {
            return Err(Error::format(format!("cluster count {k} invalid for {} instances", bank.len())));
        }
        let mut raw = vec![0u32; bank.len()];
        r.read_u32_into::<LittleEndian>(&mut raw).map_err(truncated("cluster labels"))?;
        let mut centroids = vec![0f32; k * bank.dim()];
        r.read_f32_into::<LittleEndian>(&mut centroids).map_err(truncated("centroids"))?;
        let mut counts = vec![0u64; k];
        r.read_u64_into::<LittleEndian>(&mut counts).map_err(truncated("cluster counts"))?;

        let labels: Vec<usize> = raw.into_iter().map(|l| l as usize).collect();
        let mut state =
            ClusterState::from_labels(bank, labels, k).map_err(|e| Error::format(format!("cluster segment: {e}")))?;
        if state.counts != counts {
            return Err(Error::format("cluster counts disagree with stored labels"));
        }
        state.centroids = Array2::from_shape_vec((k, bank.dim()), centroids).expect("length checked");
        Ok(state)
    }
}

fn argmax_lowest(counts: &[u64]) -> usize {
    let mut best = 0;
    for (j, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = j;
        }
    }
    best
}

/// Nearest non-empty centroid by squared Euclidean distance; ties go to the
/// lowest cluster index.
pub fn assign_nearest_centroid(feature: &[f32], state: &ClusterState) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, c) in state.centroids.outer_iter().enumerate() {
        if state.counts[j] == 0 {
            continue;
        }
        let d = squared_distance(feature, c.as_slice().expect("contiguous"));
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((j, d));
        }
    }
    best.ok_or_else(|| Error::InvalidState("all clusters are empty".into()))
}

/// k-means++ seeding: returns `k` distinct row indices.
pub fn kmeans_pp_seeds(features: ArrayView2<f32>, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = features.nrows();
    if k == 0 || k > n {
        return Err(Error::config(format!("cannot seed {k} clusters from {n} points")));
    }
    let row = |i: usize| features.row(i).to_slice().expect("contiguous");
    let mut seeds = vec![rng.random_range(0..n)];
    let mut chosen = vec![false; n];
    chosen[seeds[0]] = true;
    let mut closest: Vec<f64> = (0..n).map(|i| squared_distance(row(i), row(seeds[0]))).collect();
    while seeds.len() < k {
        let total: f64 = (0..n).filter(|&i| !chosen[i]).map(|i| closest[i]).sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for i in (0..n).filter(|&i| !chosen[i]) {
                acc += closest[i];
                if closest[i] > 0.0 {
                    pick = Some(i);
                    if acc > target {
                        break;
                    }
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // Remaining points all coincide with a seed.
            let rest: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            rest[rng.random_range(0..rest.len())]
        };
        chosen[next] = true;
        seeds.push(next);
        for (i, c) in closest.iter_mut().enumerate() {
            *c = c.min(squared_distance(row(i), row(next)));
        }
    }
    Ok(seeds)
}

fn nearest_f64(feature: &[f32], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d: f64 = feature
            .iter()
            .zip(c)
            .map(|(&x, &m)| {
                let t = x as f64 - m;
                t * t
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeds over the bank rows.
///
/// Stops at an assignment fixpoint, when no centroid moves by more than `tol`,
/// or after `max_iters` refinement rounds. Empty clusters left at the end are
/// repaired.
pub fn global_kmeans(bank: &MemoryBank, k: usize, max_iters: usize, tol: f64, rng: &mut Rng) -> Result<ClusterState> {
    if k > bank.len() {
        return Err(Error::config(format!("k = {k} exceeds {} instances", bank.len())));
    }
    if max_iters == 0 {
        return Err(Error::config("k-means needs at least one iteration"));
    }
    let features = bank.features();
    let seeds = kmeans_pp_seeds(features, k, rng)?;
    let mut centroids: Vec<Vec<f64>> = seeds
        .iter()
        .map(|&i| bank.row(i).iter().map(|&x| x as f64).collect())
        .collect();
    let mut labels: Vec<usize> = (0..bank.len()).into_par_iter().map(|i| nearest_f64(bank.row(i), &centroids)).collect();
    for _ in 0..max_iters {
        let shift = lloyd_means(bank, &labels, &mut centroids);
        let next: Vec<usize> = (0..bank.len()).into_par_iter().map(|i| nearest_f64(bank.row(i), &centroids)).collect();
        let fixed = next == labels;
        labels = next;
        if fixed || shift <= tol {
            break;
        }
    }
    let mut state = ClusterState::from_labels(bank, labels, k)?;
    state.handle_empty_clusters(bank, rng)?;
    Ok(state)
}

/// Moves each non-empty centroid to its members' mean; returns the largest move.
fn lloyd_means(bank: &MemoryBank, labels: &[usize], centroids: &mut [Vec<f64>]) -> f64 {
    let d = bank.dim();
    let mut sums = vec![vec![0.0f64; d]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, &x) in sums[l].iter_mut().zip(bank.row(i)) {
            *s += x as f64;
        }
    }
    let mut shift = 0.0f64;
    for (j, c) in centroids.iter_mut().enumerate() {
        if counts[j] == 0 {
            continue;
        }
        let mut moved = 0.0;
        for (m, s) in c.iter_mut().zip(&sums[j]) {
            let new = s / counts[j] as f64;
            moved += (new - *m) * (new - *m);
            *m = new;
        }
        shift = shift.max(moved.sqrt());
    }
    shift
}

/// Offline relabeling: a fresh global k-means over the current bank.
pub fn offline_relabel(bank: &MemoryBank, k: usize, max_iters: usize, rng: &mut Rng) -> Result<ClusterState> {
    global_kmeans(bank, k, max_iters, 0.0, rng)
}
