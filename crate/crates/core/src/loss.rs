//! Contrastive losses over one positive and K negatives.
//!
//! All losses are evaluated through a max-shifted log-sum-exp, so any unit
//! vectors and temperatures down to 1e-3 give finite values. Gradients are
//! taken with respect to the anchor only: positives and negatives come from
//! the memory bank and are constants.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Allowed deviation from unit norm for [`PairBatch`] rows.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub m_intra: f64,
    pub m_inter: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            m_intra: 0.0,
            m_inter: -0.5,
            lambda: 0.75,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        for (name, m) in [("m_intra", self.m_intra), ("m_inter", self.m_inter)] {
            if !(m > -2.0 && m < 2.0) {
                return Err(Error::config(format!("loss.{name} = {m} outside (-2, 2)")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("loss.lambda = {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// An anchor embedding with one positive and `K` negatives, all unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch<T> {
    pub anchor: Array1<T>,
    pub positive: Array1<T>,
    pub negatives: Array2<T>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn new(anchor: Array1<T>, positive: Array1<T>, negatives: Array2<T>) -> Result<Self> {
        let d = anchor.len();
        if positive.len() != d || negatives.ncols() != d {
            return Err(Error::shape("anchor, positive and negatives must share one dimension"));
        }
        if negatives.nrows() == 0 {
            return Err(Error::config("at least one negative is required"));
        }
        let rows = std::iter::once(anchor.view())
            .chain(std::iter::once(positive.view()))
            .chain(negatives.outer_iter());
        for (r, row) in rows.enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("non-finite entry in pair row {r}")));
            }
            let norm = row.dot(&row).as_f64().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::degenerate(format!("pair row {r} has norm {norm}")));
            }
        }
        Ok(Self { anchor, positive, negatives })
    }
}

/// Loss and its partial derivatives with respect to each cosine.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginTerms<T> {
    pub loss: T,
    /// `∂L/∂cos θ⁺ = (p⁺ − 1)/τ`, always negative.
    pub d_positive: T,
    /// `∂L/∂cos θ⁻_j = p⁻_j/τ`, always positive.
    pub d_negatives: Vec<T>,
}

/// `−log softmax` of the first logit.
fn neg_log_softmax_first<T: Scalar>(logits: &[T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln() - logits[0]
}

fn check_inputs<T: Scalar>(tau: T, values: impl IntoIterator<Item = T>) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::numeric(format!("temperature must be positive and finite, got {tau}")));
    }
    if values.into_iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite similarity"));
    }
    Ok(())
}

/// Margin NCE evaluated from precomputed cosines.
pub fn margin_nce_terms<T: Scalar>(pos_cos: T, neg_cos: &[T], tau: T, m: T) -> Result<MarginTerms<T>> {
    check_inputs(tau, std::iter::once(pos_cos).chain(neg_cos.iter().copied()).chain([m]))?;
    if neg_cos.is_empty() {
        return Err(Error::config("at least one negative is required"));
    }
    let mut logits = Vec::with_capacity(neg_cos.len() + 1);
    logits.push((pos_cos - m) / tau);
    logits.extend(neg_cos.iter().map(|&c| c / tau));
    let loss = neg_log_softmax_first(&logits);

    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = weights.iter().copied().sum();
    let d_negatives: Vec<T> = weights[1..].iter().map(|&w| w / total / tau).collect();
    // p⁺ − 1 = −Σ p⁻, which avoids cancellation when p⁺ ≈ 1.
    let neg_mass: T = weights[1..].iter().copied().sum::<T>() / total;
    let d_positive = -neg_mass / tau;
    Ok(MarginTerms { loss, d_positive, d_negatives })
}

fn cosines<T: Scalar>(anchor: ArrayView1<T>, positive: ArrayView1<T>, negatives: ArrayView2<T>) -> (T, Vec<T>) {
    let pos = anchor.dot(&positive);
    let neg = negatives.dot(&anchor).to_vec();
    (pos, neg)
}

/// InfoNCE with dot-product similarity.
pub fn info_nce<T: Scalar>(pair: &PairBatch<T>, tau: T) -> Result<T> {
    let (pos, neg) = cosines(pair.anchor.view(), pair.positive.view(), pair.negatives.view());
    check_inputs(tau, std::iter::once(pos).chain(neg.iter().copied()))?;
    let mut logits = Vec::with_capacity(neg.len() + 1);
    logits.push(pos / tau);
    logits.extend(neg.iter().map(|&c| c / tau));
    Ok(neg_log_softmax_first(&logits))
}

/// InfoNCE with the positive cosine shifted down by the margin `m`.
pub fn margin_nce<T: Scalar>(pair: &PairBatch<T>, tau: T, m: T) -> Result<T> {
    let (pos, neg) = cosines(pair.anchor.view(), pair.positive.view(), pair.negatives.view());
    margin_nce_terms(pos, &neg, tau, m).map(|t| t.loss)
}

pub fn combined_loss<T: Scalar>(intra: T, inter: T, lambda: T) -> T {
    lambda * intra + (T::one() - lambda) * inter
}

/// Loss and gradient with respect to the anchor, without re-validating norms.
pub fn margin_nce_with_grad<T: Scalar>(
    anchor: ArrayView1<T>,
    positive: ArrayView1<T>,
    negatives: ArrayView2<T>,
    tau: T,
    m: T,
) -> Result<(T, Array1<T>)> {
    let (pos, neg) = cosines(anchor, positive, negatives);
    let terms = margin_nce_terms(pos, &neg, tau, m)?;
    let mut grad = positive.mapv(|x| x * terms.d_positive);
    for (row, &w) in negatives.outer_iter().zip(&terms.d_negatives) {
        grad.scaled_add(w, &row);
    }
    Ok((terms.loss, grad))
}

/// `∂L/∂v = (1/τ)·((p⁺ − 1)·v⁺ + Σ p⁻_j·v⁻_j)`.
pub fn grad_margin_nce<T: Scalar>(pair: &PairBatch<T>, tau: T, m: T) -> Result<Array1<T>> {
    margin_nce_with_grad(pair.anchor.view(), pair.positive.view(), pair.negatives.view(), tau, m).map(|(_, g)| g)
}
