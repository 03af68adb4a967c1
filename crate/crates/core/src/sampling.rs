//! Inter-instance positive and negative sampling from pseudo-labels.
//!
//! Positives are drawn from the anchor's own cluster. Negatives come from all
//! other clusters, picked by one of four strategies that rank candidates by
//! cosine similarity between stored bank features.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bank::MemoryBank;
use crate::clustering::ClusterState;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vector::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// The K most similar candidates.
    Hard,
    /// K draws from the most similar `pool_fraction` of candidates.
    SemiHard,
    /// K uniform draws from all candidates.
    Random,
    /// K draws from the least similar `pool_fraction` of candidates.
    SemiEasy,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Hard, Strategy::SemiHard, Strategy::Random, Strategy::SemiEasy];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Hard => "hard",
            Strategy::SemiHard => "semi_hard",
            Strategy::Random => "random",
            Strategy::SemiEasy => "semi_easy",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown sampling strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub strategy: Strategy,
    /// Negatives per anchor, shared by both branches.
    #[serde(rename = "K")]
    pub k: usize,
    pub pool_fraction: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::SemiHard,
            k: 256,
            pool_fraction: 0.10,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("sampling.K must be at least 1"));
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return Err(Error::config(format!("sampling.pool_fraction {} outside (0, 1]", self.pool_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Nearest,
    Farthest,
}

/// Positive candidates (same label, excluding the anchor) and negative
/// candidates (every other label), both in ascending id order.
pub fn candidate_split(anchor: usize, state: &ClusterState) -> (Vec<usize>, Vec<usize>) {
    let own = state.label(anchor);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (j, &l) in state.labels().iter().enumerate() {
        if j == anchor {
            continue;
        }
        if l == own {
            pos.push(j);
        } else {
            neg.push(j);
        }
    }
    (pos, neg)
}

fn check_anchor(anchor: usize, state: &ClusterState) -> Result<()> {
    if anchor < state.len() {
        Ok(())
    } else {
        Err(Error::OutOfRange { index: anchor, len: state.len() })
    }
}

/// Uniform draw from the anchor's positive candidates; a singleton cluster
/// yields the anchor itself.
pub fn sample_positive_inter(anchor: usize, state: &ClusterState, rng: &mut Rng) -> Result<usize> {
    check_anchor(anchor, state)?;
    let own = state.label(anchor);
    let size = state.counts()[own] as usize - 1;
    if size == 0 {
        return Ok(anchor);
    }
    let pick = rng.random_range(0..size);
    Ok(state
        .labels()
        .iter()
        .enumerate()
        .filter(|&(j, &l)| l == own && j != anchor)
        .nth(pick)
        .map(|(j, _)| j)
        .expect("cluster count matches labels"))
}

/// Maps `x` to an integer with the same order; NaN sorts below everything.
pub(crate) fn order_key(x: f64) -> u64 {
    if x.is_nan() {
        return 0;
    }
    let bits = (x + 0.0).to_bits(); // folds -0 into +0
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

/// The first `take` candidates under the chosen ordering, in that order.
/// Equal similarities go to the lowest id.
fn top_ranked(candidates: &[usize], score: &dyn Fn(usize) -> f64, take: usize, mode: PoolMode) -> Vec<usize> {
    let mut keyed: Vec<u128> = candidates
        .iter()
        .map(|&j| {
            let k = order_key(score(j));
            let k = match mode {
                PoolMode::Nearest => !k,
                PoolMode::Farthest => k,
            };
            ((k as u128) << 64) | j as u128
        })
        .collect();
    let take = take.min(keyed.len());
    if take == 0 {
        return Vec::new();
    }
    if take < keyed.len() {
        keyed.select_nth_unstable(take - 1);
        keyed.truncate(take);
    }
    keyed.sort_unstable();
    keyed.into_iter().map(|k| k as u64 as usize).collect()
}

pub fn pool_size(candidates: usize, pool_fraction: f64) -> usize {
    ((pool_fraction * candidates as f64).ceil() as usize).clamp(1, candidates.max(1))
}

/// The `ceil(pool_fraction * |negatives|)` candidates nearest to (or farthest
/// from) the anchor's stored feature by cosine similarity.
pub fn neighbor_pool(
    anchor: usize,
    bank: &MemoryBank,
    negatives: &[usize],
    mode: PoolMode,
    pool_fraction: f64,
) -> Result<Vec<usize>> {
    let a = bank.row(anchor);
    pool_by_score(anchor, negatives, &|j| dot(a, bank.row(j)), mode, pool_fraction)
}

fn pool_by_score(
    anchor: usize,
    negatives: &[usize],
    score: &dyn Fn(usize) -> f64,
    mode: PoolMode,
    pool_fraction: f64,
) -> Result<Vec<usize>> {
    if negatives.is_empty() {
        return Err(Error::NoNegatives(anchor));
    }
    if !(pool_fraction > 0.0 && pool_fraction <= 1.0) {
        return Err(Error::config(format!("pool fraction {pool_fraction} outside (0, 1]")));
    }
    Ok(top_ranked(negatives, score, pool_size(negatives.len(), pool_fraction), mode))
}

/// `k` uniform draws: without replacement when the population allows it.
fn draw(population: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    if population.len() >= k {
        index::sample(rng, population.len(), k)
            .into_iter()
            .map(|p| population[p])
            .collect()
    } else {
        (0..k).map(|_| population[rng.random_range(0..population.len())]).collect()
    }
}

/// Draws `cfg.k` negatives for `anchor` from the other pseudo-classes.
pub fn sample_negatives(
    anchor: usize,
    bank: &MemoryBank,
    state: &ClusterState,
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    check_anchor(anchor, state)?;
    if bank.len() != state.len() {
        return Err(Error::shape("bank and cluster state differ in length"));
    }
    let a = bank.row(anchor);
    negatives_by_score(anchor, &|j| dot(a, bank.row(j)), state, cfg, rng)
}

/// As [`sample_negatives`], with the anchor's similarity to every bank row
/// supplied by the caller (for example from one batched product).
pub fn sample_negatives_scored(
    anchor: usize,
    similarities: &[f64],
    state: &ClusterState,
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    check_anchor(anchor, state)?;
    if similarities.len() != state.len() {
        return Err(Error::shape(format!("{} similarities for {} instances", similarities.len(), state.len())));
    }
    negatives_by_score(anchor, &|j| similarities[j], state, cfg, rng)
}

fn negatives_by_score(
    anchor: usize,
    score: &dyn Fn(usize) -> f64,
    state: &ClusterState,
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let (_, negatives) = candidate_split(anchor, state);
    if negatives.is_empty() {
        return Err(Error::NoNegatives(anchor));
    }
    Ok(match cfg.strategy {
        Strategy::Hard => {
            let mut top = top_ranked(&negatives, score, cfg.k, PoolMode::Nearest);
            // Fewer candidates than K: cycle through the ranking.
            let ranked = top.len();
            for i in ranked..cfg.k {
                top.push(top[i % ranked]);
            }
            top
        }
        Strategy::SemiHard => draw(
            &pool_by_score(anchor, &negatives, score, PoolMode::Nearest, cfg.pool_fraction)?,
            cfg.k,
            rng,
        ),
        Strategy::Random => draw(&negatives, cfg.k, rng),
        Strategy::SemiEasy => draw(
            &pool_by_score(anchor, &negatives, score, PoolMode::Farthest, cfg.pool_fraction)?,
            cfg.k,
            rng,
        ),
    })
}
