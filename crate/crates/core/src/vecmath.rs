//! Vector primitives shared by every similarity computation: normalization,
//! cosine similarity, log-sum-exp, and the bidirectional KL divergence
//! between embeddings.
//!
//! Reductions go through [`stable_sum`], a pairwise summation whose order is
//! fixed by index, so results are reproducible bit-for-bit across runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero by [`normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Tolerance on the unit-norm invariant.
pub const UNIT_TOL: f64 = 1e-6;

const PAIRWISE_BLOCK: usize = 8;

/// Pairwise summation with a fixed, index-determined reduction tree.
pub fn stable_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        stable_sum(&xs[..mid]) + stable_sum(&xs[mid..])
    }
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= PAIRWISE_BLOCK {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    } else {
        let mid = a.len() / 2;
        dot(&a[..mid], &b[..mid]) + dot(&a[mid..], &b[mid..])
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
    stable_sum(&diffs)
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// An L2-normalized, finite real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    /// Wraps `values` after checking finiteness and unit norm.
    pub fn try_new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("embedding"));
        }
        let n = norm(&values);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidArgument(format!(
                "embedding norm {n} is not 1 within {UNIT_TOL}"
            )));
        }
        Ok(UnitEmbedding(values))
    }

    /// Caller guarantees the invariant (output of a normalization).
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        debug_assert!((norm(&values) - 1.0).abs() <= UNIT_TOL);
        UnitEmbedding(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for UnitEmbedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        UnitEmbedding::try_new(values)
    }
}

impl From<UnitEmbedding> for Vec<f64> {
    fn from(u: UnitEmbedding) -> Self {
        u.0
    }
}

impl AsRef<[f64]> for UnitEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Returns `v / ‖v‖`.
pub fn normalize(v: &[f64]) -> Result<UnitEmbedding> {
    if v.is_empty() {
        return Err(Error::Empty("vector to normalize".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("vector to normalize"));
    }
    let n = norm(v);
    if n <= MIN_NORM {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(UnitEmbedding::from_normalized(
        v.iter().map(|x| x / n).collect(),
    ))
}

/// Cosine similarity of two unit embeddings, i.e. their dot product.
pub fn cosine_sim(u: &UnitEmbedding, v: &UnitEmbedding) -> f64 {
    dot(u.as_slice(), v.as_slice())
}

/// `log Σ exp(x_i)` with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("log_sum_exp input".into()));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("log_sum_exp input"));
    }
    Ok(lse(xs))
}

/// Unchecked log-sum-exp for internal callers that already hold a
/// non-empty finite slice.
pub(crate) fn lse(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    max + stable_sum(&shifted).ln()
}

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total = stable_sum(&exps);
    exps.into_iter().map(|e| e / total).collect()
}

/// How an embedding is turned into a probability distribution over its
/// coordinates before KL divergences are taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbSpec {
    /// Softmax temperature over coordinates.
    pub temperature: f64,
    /// Probabilities are clamped to at least this before renormalizing.
    pub floor: f64,
}

impl Default for ProbSpec {
    fn default() -> Self {
        ProbSpec {
            temperature: 1.0,
            floor: 1e-8,
        }
    }
}

/// A strictly positive probability vector, stored with its logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ProbVector {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

/// Softmax of `q / temperature`, floored and renormalized.
pub fn embed_to_prob(q: &UnitEmbedding, spec: &ProbSpec) -> ProbVector {
    prob_from_slice(q.as_slice(), spec)
}

pub(crate) fn prob_from_slice(q: &[f64], spec: &ProbSpec) -> ProbVector {
    let scaled: Vec<f64> = q.iter().map(|x| x / spec.temperature).collect();
    let raw = softmax(&scaled);
    let floored: Vec<f64> = raw.iter().map(|p| p.max(spec.floor)).collect();
    let total = stable_sum(&floored);
    let probs: Vec<f64> = floored.into_iter().map(|p| p / total).collect();
    let log_probs = probs.iter().map(|p| p.ln()).collect();
    ProbVector { probs, log_probs }
}

/// `KL(P‖R) + KL(R‖P) = Σ (p − r)(ln p − ln r)`.
pub fn symmetric_kl(p: &ProbVector, r: &ProbVector) -> f64 {
    let terms: Vec<f64> = p
        .probs
        .iter()
        .zip(&r.probs)
        .zip(p.log_probs.iter().zip(&r.log_probs))
        .map(|((pc, rc), (lp, lr))| (pc - rc) * (lp - lr))
        .collect();
    stable_sum(&terms)
}

/// Bidirectional KL divergence between the coordinate distributions of two
/// embeddings.
pub fn bidirectional_kl(q: &UnitEmbedding, h: &UnitEmbedding, spec: &ProbSpec) -> f64 {
    symmetric_kl(&embed_to_prob(q, spec), &embed_to_prob(h, spec))
}
