//! Loss functions and their exact gradients.
//!
//! For a query `q`, queue entries `h_k` and weighted neighbors `(j, ω_j)`,
//! with `s_k = qᵀh_k / τ` and `D_k = d_KL(q, h_k)`:
//!
//! * DOWN:  `L1 = −Σ_j ω_j (s_j − LSE_k s_k)`
//! * STAR:  `kl_term = −γ Σ_j ω_j (−D_j/τ − LSE_k(−D_k/τ))`
//!          `euclid_term = −Σ_j ω_j (s_j − LSE_k(s_k + D_k ln B))`
//!
//! The `B^{D_k}` factor of each denominator term is folded into its logit as
//! `D_k ln B`, which is exact and cannot overflow. Queue entries are
//! constants: no gradient flows into them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::encoder::{EncoderParams, Trace};
use crate::error::{Error, Result};
use crate::neighborhood::{retrieve_neighbors, AlphaSchedule, MomentumQueue, NeighborSet, RetrievalConfig};
use crate::vecmath::{self, lse, softmax, ProbSpec, ProbVector, UnitEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Coarse cross-entropy only.
    Pretrain,
    Down,
    Star,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Pretrain => "pretrain",
            Objective::Down => "down",
            Objective::Star => "star",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub objective: Objective,
    pub tau: f64,
    pub gamma: f64,
    pub prob: ProbSpec,
    /// Include coarse cross-entropy in DOWN/STAR training.
    pub use_ce: bool,
    /// Include the KL-space contrastive term of the STAR loss.
    pub kl_loss: bool,
    /// Apply the `B^{d_KL}` modulation in the STAR denominator.
    pub kl_weight: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            objective: Objective::Star,
            tau: 0.07,
            gamma: 1.0,
            prob: ProbSpec::default(),
            use_ce: true,
            kl_loss: true,
            kl_weight: true,
        }
    }
}

/// Everything a batch objective needs besides parameters and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub loss: LossConfig,
    pub retrieval: RetrievalConfig,
    pub alpha: AlphaSchedule,
}

/// Batch-mean loss components. In DOWN mode `kl_term` and `euclid_term`
/// are zero; in STAR mode `contrastive = kl_term + euclid_term`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub contrastive: f64,
    pub kl_term: f64,
    pub euclid_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, other: &LossBreakdown, scale: f64) {
        self.ce += other.ce * scale;
        self.contrastive += other.contrastive * scale;
        self.kl_term += other.kl_term * scale;
        self.euclid_term += other.euclid_term * scale;
        self.total += other.total * scale;
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("ce", self.ce),
            ("contrastive", self.contrastive),
            ("kl_term", self.kl_term),
            ("euclid_term", self.euclid_term),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::non_finite(format!("loss component {name}")));
            }
        }
        Ok(())
    }
}

/// Softmax cross-entropy `LSE(logits) − logits[label]`.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(vecmath::log_sum_exp(logits)? - logits[label])
}

/// Queue snapshot with cached coordinate distributions.
pub struct PreparedQueue<'a> {
    embeddings: Vec<&'a [f64]>,
    probs: Vec<ProbVector>,
}

impl<'a> PreparedQueue<'a> {
    pub fn new(queue: &'a MomentumQueue, prob: &ProbSpec) -> Result<Self> {
        if queue.is_empty() {
            return Err(Error::Empty("queue".into()));
        }
        let embeddings: Vec<&[f64]> = queue.iter().map(|e| e.embedding.as_slice()).collect();
        let probs = embeddings
            .iter()
            .map(|h| vecmath::prob_from_slice(h, prob))
            .collect();
        Ok(PreparedQueue { embeddings, probs })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

fn check_neighbors(neighbors: &NeighborSet, queue_len: usize) -> Result<()> {
    if neighbors.is_empty() {
        return Err(Error::Empty("neighbor set".into()));
    }
    if let Some(n) = neighbors.iter().find(|n| n.queue_index >= queue_len) {
        return Err(Error::InvalidArgument(format!(
            "neighbor queue index {} outside queue of {queue_len}",
            n.queue_index
        )));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::InvalidArgument(format!("{name} must be finite and > 0, got {v}")));
    }
    Ok(())
}

/// Per-query contrastive value plus its gradients with respect to `q` and
/// `b_raw`.
#[derive(Debug, Clone)]
struct ContrastiveEval {
    contrastive: f64,
    kl_term: f64,
    euclid_term: f64,
    grad_q: Vec<f64>,
    grad_b_raw: f64,
}

/// Shared per-query evaluator for both objectives.
fn contrastive_eval(
    q: &[f64],
    neighbors: &NeighborSet,
    queue: &PreparedQueue<'_>,
    cfg: &LossConfig,
    ln_base: f64,
) -> Result<ContrastiveEval> {
    let n = queue.len();
    let tau = cfg.tau;
    let logits: Vec<f64> = queue.embeddings.iter().map(|h| vecmath::dot(q, h) / tau).collect();
    let mut weight_at = vec![0.0; n];
    for nb in neighbors.iter() {
        weight_at[nb.queue_index] += nb.weight;
    }
    let weight_total = vecmath::stable_sum(&weight_at);
    let weighted_logits: Vec<f64> = weight_at.iter().zip(&logits).map(|(w, s)| w * s).collect();
    let positive_logit = vecmath::stable_sum(&weighted_logits);

    // d(loss)/d(s_k) and d(loss)/d(D_k).
    let mut g_logits = vec![0.0; n];
    let mut g_kl = vec![0.0; n];
    let mut out = ContrastiveEval {
        contrastive: 0.0,
        kl_term: 0.0,
        euclid_term: 0.0,
        grad_q: vec![0.0; q.len()],
        grad_b_raw: 0.0,
    };
    let mut p_q: Option<ProbVector> = None;

    match cfg.objective {
        Objective::Pretrain => return Ok(out),
        Objective::Down => {
            let pi = softmax(&logits);
            out.contrastive = weight_total * lse(&logits) - positive_logit;
            for k in 0..n {
                g_logits[k] = weight_total * pi[k] - weight_at[k];
            }
        }
        Objective::Star => {
            let pq = vecmath::prob_from_slice(q, &cfg.prob);
            let kl: Vec<f64> = queue.probs.iter().map(|r| vecmath::symmetric_kl(&pq, r)).collect();

            if cfg.kl_loss && cfg.gamma != 0.0 {
                let neg_kl: Vec<f64> = kl.iter().map(|d| -d / tau).collect();
                let rho = softmax(&neg_kl);
                let weighted: Vec<f64> = weight_at.iter().zip(&kl).map(|(w, d)| w * d / tau).collect();
                out.kl_term = cfg.gamma * (vecmath::stable_sum(&weighted) + weight_total * lse(&neg_kl));
                for k in 0..n {
                    g_kl[k] += cfg.gamma / tau * (weight_at[k] - weight_total * rho[k]);
                }
            }

            let shift = if cfg.kl_weight { ln_base } else { 0.0 };
            let shifted: Vec<f64> = logits.iter().zip(&kl).map(|(s, d)| s + d * shift).collect();
            let pi = softmax(&shifted);
            out.euclid_term = weight_total * lse(&shifted) - positive_logit;
            for k in 0..n {
                g_logits[k] = weight_total * pi[k] - weight_at[k];
                g_kl[k] += weight_total * pi[k] * shift;
            }
            if cfg.kl_weight {
                let expected_kl: Vec<f64> = pi.iter().zip(&kl).map(|(p, d)| p * d).collect();
                out.grad_b_raw = weight_total * vecmath::stable_sum(&expected_kl);
            }
            out.contrastive = out.kl_term + out.euclid_term;
            p_q = Some(pq);
        }
    }

    for (k, h) in queue.embeddings.iter().enumerate() {
        let g = g_logits[k] / tau;
        if g != 0.0 {
            for (gq, hc) in out.grad_q.iter_mut().zip(h.iter()) {
                *gq += g * hc;
            }
        }
    }

    if let Some(pq) = p_q {
        // ∂D_k/∂p_c = ln p_c − ln r_c + 1 − r_c / p_c
        let mut g_p = vec![0.0; q.len()];
        for (k, r) in queue.probs.iter().enumerate() {
            let g = g_kl[k];
            if g == 0.0 {
                continue;
            }
            for c in 0..q.len() {
                let (p, lp) = (pq.probs()[c], pq.log_probs()[c]);
                let (rc, lr) = (r.probs()[c], r.log_probs()[c]);
                g_p[c] += g * (lp - lr + 1.0 - rc / p);
            }
        }
        let g_from_kl = prob_backward(q, &cfg.prob, &g_p);
        for (gq, g) in out.grad_q.iter_mut().zip(g_from_kl) {
            *gq += g;
        }
    }

    if !out.contrastive.is_finite() {
        let term = if !out.kl_term.is_finite() {
            "kl_term"
        } else if !out.euclid_term.is_finite() {
            "euclid_term"
        } else {
            "contrastive"
        };
        return Err(Error::non_finite(term));
    }
    Ok(out)
}

/// Pulls a gradient on the floored coordinate distribution back to the
/// embedding coordinates.
fn prob_backward(q: &[f64], spec: &ProbSpec, g_p: &[f64]) -> Vec<f64> {
    let scaled: Vec<f64> = q.iter().map(|x| x / spec.temperature).collect();
    let raw = softmax(&scaled);
    let floored: Vec<f64> = raw.iter().map(|p| p.max(spec.floor)).collect();
    let total = vecmath::stable_sum(&floored);
    let probs: Vec<f64> = floored.iter().map(|m| m / total).collect();

    let inner: Vec<f64> = g_p.iter().zip(&probs).map(|(g, p)| g * p).collect();
    let inner = vecmath::stable_sum(&inner);
    let g_raw: Vec<f64> = g_p
        .iter()
        .zip(&raw)
        .map(|(g, &r)| if r > spec.floor { (g - inner) / total } else { 0.0 })
        .collect();
    let dot = vecmath::dot(&g_raw, &raw);
    raw.iter()
        .zip(&g_raw)
        .map(|(r, g)| r * (g - dot) / spec.temperature)
        .collect()
}

/// Rank-weighted InfoNCE over the whole queue.
pub fn down_loss_l1(
    q: &UnitEmbedding,
    neighbors: &NeighborSet,
    queue: &MomentumQueue,
    tau: f64,
) -> Result<f64> {
    check_positive("tau", tau)?;
    let prepared = PreparedQueue::new(queue, &ProbSpec::default())?;
    check_neighbors(neighbors, prepared.len())?;
    let cfg = LossConfig {
        objective: Objective::Down,
        tau,
        ..LossConfig::default()
    };
    Ok(contrastive_eval(q.as_slice(), neighbors, &prepared, &cfg, 0.0)?.contrastive)
}

/// Parameters of the STAR per-query loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarTerms {
    pub tau: f64,
    pub gamma: f64,
    pub base: f64,
    pub prob: ProbSpec,
    pub kl_loss: bool,
    pub kl_weight: bool,
}

impl StarTerms {
    pub fn new(tau: f64, gamma: f64, base: f64) -> Self {
        StarTerms {
            tau,
            gamma,
            base,
            prob: ProbSpec::default(),
            kl_loss: true,
            kl_weight: true,
        }
    }
}

/// The two STAR components for one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarComponents {
    pub kl_term: f64,
    pub euclid_term: f64,
}

pub fn star_loss_l2(
    q: &UnitEmbedding,
    neighbors: &NeighborSet,
    queue: &MomentumQueue,
    terms: &StarTerms,
) -> Result<StarComponents> {
    check_positive("tau", terms.tau)?;
    check_positive("B", terms.base)?;
    if !(terms.gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {}", terms.gamma)));
    }
    let prepared = PreparedQueue::new(queue, &terms.prob)?;
    check_neighbors(neighbors, prepared.len())?;
    let cfg = LossConfig {
        objective: Objective::Star,
        tau: terms.tau,
        gamma: terms.gamma,
        prob: terms.prob,
        use_ce: true,
        kl_loss: terms.kl_loss,
        kl_weight: terms.kl_weight,
    };
    let eval = contrastive_eval(q.as_slice(), neighbors, &prepared, &cfg, terms.base.ln())?;
    Ok(StarComponents {
        kl_term: eval.kl_term,
        euclid_term: eval.euclid_term,
    })
}

/// Literal evaluation of
/// `Σ_j ω_j (ln Σ_k B^{D_k} exp(qᵀh_k/τ) − qᵀh_j/τ)`, without any log-domain
/// rewriting. Used as an identity check on the STAR Euclidean term.
pub fn expanded_l22(
    q: &UnitEmbedding,
    neighbors: &NeighborSet,
    queue: &MomentumQueue,
    tau: f64,
    base: f64,
    prob: &ProbSpec,
) -> Result<f64> {
    check_positive("tau", tau)?;
    check_positive("B", base)?;
    check_neighbors(neighbors, queue.len())?;
    let entries: Vec<&UnitEmbedding> = queue.iter().map(|e| &e.embedding).collect();
    let denominator: f64 = entries
        .iter()
        .map(|h| {
            let d = vecmath::bidirectional_kl(q, h, prob);
            base.powf(d) * (vecmath::cosine_sim(q, h) / tau).exp()
        })
        .sum();
    let log_den = denominator.ln();
    let value: f64 = neighbors
        .iter()
        .map(|nb| nb.weight * (log_den - vecmath::cosine_sim(q, entries[nb.queue_index]) / tau))
        .sum();
    if !value.is_finite() {
        return Err(Error::non_finite("expanded L2-2"));
    }
    Ok(value)
}

/// Loss and (optionally) flat gradient for one query.
fn sample_eval(
    params: &EncoderParams,
    trace: &Trace,
    label: usize,
    neighbors: Option<&NeighborSet>,
    queue: Option<&PreparedQueue<'_>>,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let q = trace.embedding();
    let logits = params.classify_coarse(q);
    let ce_active = cfg.use_ce || cfg.objective == Objective::Pretrain;
    let ce = if ce_active { ce_loss(&logits, label)? } else { 0.0 };

    let contrastive = match cfg.objective {
        Objective::Pretrain => None,
        Objective::Down | Objective::Star => {
            let neighbors = neighbors.ok_or_else(|| Error::Empty("neighbors for contrastive loss".into()))?;
            let queue = queue.ok_or_else(|| Error::Empty("queue for contrastive loss".into()))?;
            Some(contrastive_eval(q.as_slice(), neighbors, queue, cfg, params.b_raw)?)
        }
    };

    let mut breakdown = LossBreakdown {
        ce,
        ..LossBreakdown::default()
    };
    if let Some(c) = &contrastive {
        breakdown.contrastive = c.contrastive;
        breakdown.kl_term = c.kl_term;
        breakdown.euclid_term = c.euclid_term;
    }
    breakdown.total = breakdown.ce + breakdown.contrastive;
    breakdown.check_finite()?;

    if !with_grad {
        return Ok((breakdown, None));
    }
    let mut grad = vec![0.0; params.num_params()];
    let mut g_q = vec![0.0; q.dim()];
    if ce_active {
        let mut g_logits = softmax(&logits);
        g_logits[label] -= 1.0;
        g_q = params.head_backward(q.as_slice(), &g_logits, &mut grad);
    }
    if let Some(c) = &contrastive {
        for (g, c) in g_q.iter_mut().zip(&c.grad_q) {
            *g += c;
        }
        let b = params.b_raw_index();
        grad[b] += c.grad_b_raw;
    }
    let net_len = params.net.num_params();
    params.net.backward(trace, &g_q, &mut grad[..net_len]);
    Ok((breakdown, Some(grad)))
}

/// Mean loss over a batch with neighbor sets held fixed, plus the exact
/// gradient of that mean with respect to every parameter.
pub fn compute_gradients_with_neighbors(
    params: &EncoderParams,
    batch: &[&LabeledSample],
    queue: Option<&MomentumQueue>,
    neighbors: Option<&[NeighborSet]>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let traces = forward_batch(params, batch)?;
    evaluate_batch(params, batch, &traces, queue, neighbors, cfg, true)
        .map(|(loss, grad)| (loss, grad.expect("gradient requested")))
}

fn forward_batch(params: &EncoderParams, batch: &[&LabeledSample]) -> Result<Vec<Trace>> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    batch
        .par_iter()
        .map(|s| params.net.forward(&s.features))
        .collect()
}

fn evaluate_batch(
    params: &EncoderParams,
    batch: &[&LabeledSample],
    traces: &[Trace],
    queue: Option<&MomentumQueue>,
    neighbors: Option<&[NeighborSet]>,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let needs_queue = cfg.objective != Objective::Pretrain;
    let prepared = match (needs_queue, queue) {
        (true, Some(q)) => Some(PreparedQueue::new(q, &cfg.prob)?),
        (true, None) => return Err(Error::Empty("queue".into())),
        (false, _) => None,
    };
    if needs_queue {
        let sets = neighbors.ok_or_else(|| Error::Empty("neighbor sets".into()))?;
        if sets.len() != batch.len() {
            return Err(Error::DimensionMismatch {
                expected: batch.len(),
                actual: sets.len(),
            });
        }
        for set in sets {
            check_neighbors(set, prepared.as_ref().map_or(0, PreparedQueue::len))?;
        }
    }

    let per_sample: Vec<(LossBreakdown, Option<Vec<f64>>)> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            sample_eval(
                params,
                &traces[i],
                batch[i].coarse,
                neighbors.map(|n| &n[i]),
                prepared.as_ref(),
                cfg,
                with_grad,
            )
        })
        .collect::<Result<_>>()?;

    // Fixed-order reduction.
    let scale = 1.0 / batch.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grad = with_grad.then(|| vec![0.0; params.num_params()]);
    for (l, g) in &per_sample {
        loss.add_scaled(l, scale);
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v * scale;
            }
        }
    }
    loss.check_finite()?;
    Ok((loss, grad))
}

/// Retrieves neighbors for every query of the batch against `queue`.
pub fn retrieve_batch(
    params: &EncoderParams,
    batch: &[&LabeledSample],
    queue: &MomentumQueue,
    epoch: usize,
    config: &ObjectiveConfig,
) -> Result<Vec<NeighborSet>> {
    let traces = forward_batch(params, batch)?;
    retrieve_for_traces(batch, &traces, queue, epoch, config)
}

fn retrieve_for_traces(
    batch: &[&LabeledSample],
    traces: &[Trace],
    queue: &MomentumQueue,
    epoch: usize,
    config: &ObjectiveConfig,
) -> Result<Vec<NeighborSet>> {
    let alpha = config.alpha.alpha(epoch);
    batch
        .par_iter()
        .zip(traces.par_iter())
        .map(|(s, t)| {
            retrieve_neighbors(t.embedding(), s.id, Some(s.coarse), queue, &config.retrieval, alpha)
        })
        .collect()
}

/// Batch objective with per-query retrieval at the epoch's α.
pub fn batch_objective(
    params: &EncoderParams,
    batch: &[&LabeledSample],
    queue: Option<&MomentumQueue>,
    epoch: usize,
    config: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let traces = forward_batch(params, batch)?;
    let sets = batch_neighbors(batch, &traces, queue, epoch, config)?;
    evaluate_batch(params, batch, &traces, queue, sets.as_deref(), &config.loss, false).map(|(l, _)| l)
}

/// [`batch_objective`] plus the gradient of the batch mean.
pub fn compute_gradients(
    params: &EncoderParams,
    batch: &[&LabeledSample],
    queue: Option<&MomentumQueue>,
    epoch: usize,
    config: &ObjectiveConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let traces = forward_batch(params, batch)?;
    let sets = batch_neighbors(batch, &traces, queue, epoch, config)?;
    evaluate_batch(params, batch, &traces, queue, sets.as_deref(), &config.loss, true)
        .map(|(l, g)| (l, g.expect("gradient requested")))
}

fn batch_neighbors(
    batch: &[&LabeledSample],
    traces: &[Trace],
    queue: Option<&MomentumQueue>,
    epoch: usize,
    config: &ObjectiveConfig,
) -> Result<Option<Vec<NeighborSet>>> {
    if config.loss.objective == Objective::Pretrain {
        return Ok(None);
    }
    let queue = queue.ok_or_else(|| Error::Empty("queue".into()))?;
    retrieve_for_traces(batch, traces, queue, epoch, config).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;
    use crate::neighborhood::{rank_weights, Neighbor, QueueEntry};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> UnitEmbedding {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        vecmath::normalize(&v).unwrap()
    }

    fn queue_of(embs: Vec<UnitEmbedding>) -> MomentumQueue {
        let mut q = MomentumQueue::new(embs.len()).unwrap();
        q.push(embs.into_iter().enumerate().map(|(i, e)| QueueEntry {
            sample_id: i as u64,
            embedding: e,
            coarse_label: 0,
        }));
        q
    }

    fn neighbor_set(indices: &[usize], alpha: f64, k: usize) -> NeighborSet {
        let ranks: Vec<usize> = (1..=indices.len()).collect();
        let weights = rank_weights(&ranks, alpha, k).unwrap();
        NeighborSet {
            neighbors: indices
                .iter()
                .zip(ranks.iter().zip(weights))
                .map(|(&i, (&rank, weight))| Neighbor {
                    queue_index: i,
                    sample_id: i as u64,
                    similarity: 0.0,
                    rank,
                    weight,
                })
                .collect(),
        }
    }

    /// Naive product form: every exp and power taken literally.
    fn naive_star(q: &UnitEmbedding, nb: &NeighborSet, queue: &MomentumQueue, t: &StarTerms) -> (f64, f64) {
        let hs: Vec<&UnitEmbedding> = queue.iter().map(|e| &e.embedding).collect();
        let d: Vec<f64> = hs.iter().map(|h| vecmath::bidirectional_kl(q, h, &t.prob)).collect();
        let s: Vec<f64> = hs.iter().map(|h| vecmath::cosine_sim(q, h) / t.tau).collect();
        let den1: f64 = d.iter().map(|dk| (-dk / t.tau).exp()).sum();
        let den2: f64 = d.iter().zip(&s).map(|(dk, sk)| t.base.powf(*dk) * sk.exp()).sum();
        let mut first = 0.0;
        let mut second = 0.0;
        for n in nb.iter() {
            let j = n.queue_index;
            first += n.weight * ((-d[j] / t.tau).exp() / den1).ln();
            second += n.weight * (s[j].exp() / den2).ln();
        }
        (-t.gamma * first, -second)
    }

    #[test]
    fn ce_cases() {
        assert!(ce_loss(&[100.0, 0.0], 0).unwrap() < 1e-40);
        assert_abs_diff_eq!(ce_loss(&[0.3; 5], 2).unwrap(), 5f64.ln(), epsilon = 1e-14);
        // ln(e + e²) − 1 = ln(1 + e)
        let expected = (1.0 + 1f64.exp()).ln();
        assert_abs_diff_eq!(ce_loss(&[1.0, 2.0], 0).unwrap(), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(expected, 1.3133, epsilon = 1e-4);
        assert!(ce_loss(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn down_single_element_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_unit(&mut rng, 4);
        let q = random_unit(&mut rng, 4);
        let queue = queue_of(vec![h]);
        let nb = neighbor_set(&[0], 150.0, 1);
        assert_abs_diff_eq!(down_loss_l1(&q, &nb, &queue, 0.07).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn down_matches_direct_evaluation_and_tau_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_unit(&mut rng, 3);
        let hs: Vec<UnitEmbedding> = (0..3).map(|_| random_unit(&mut rng, 3)).collect();
        let queue = queue_of(hs.clone());
        let nb = neighbor_set(&[1, 2], 4.0, 2);
        for tau in [0.07, 0.14] {
            let s: Vec<f64> = hs.iter().map(|h| vecmath::cosine_sim(&q, h) / tau).collect();
            let den: f64 = s.iter().map(|x| x.exp()).sum();
            let direct = -(2.0 / 3.0) * (s[1].exp() / den).ln() - (1.0 / 3.0) * (s[2].exp() / den).ln();
            assert_abs_diff_eq!(down_loss_l1(&q, &nb, &queue, tau).unwrap(), direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn down_decreases_as_negatives_recede() {
        let q = vecmath::normalize(&[1.0, 0.0]).unwrap();
        let pos = vecmath::normalize(&[0.9, 0.1]).unwrap();
        let near_neg = vecmath::normalize(&[0.5, 0.5]).unwrap();
        let far_neg = vecmath::normalize(&[-0.9, 0.1]).unwrap();
        let nb = neighbor_set(&[0], 2.0, 1);
        let close = down_loss_l1(&q, &nb, &queue_of(vec![pos.clone(), near_neg]), 0.07).unwrap();
        let far = down_loss_l1(&q, &nb, &queue_of(vec![pos, far_neg]), 0.07).unwrap();
        assert!(far < close);
        assert!(far >= 0.0);
    }

    #[test]
    fn star_reduces_to_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_unit(&mut rng, 8);
        let queue = queue_of((0..32).map(|_| random_unit(&mut rng, 8)).collect());
        let nb = neighbor_set(&[3, 7, 11, 20], 10.0, 4);
        let star = star_loss_l2(&q, &nb, &queue, &StarTerms::new(0.07, 0.0, 1.0)).unwrap();
        assert_eq!(star.kl_term, 0.0);
        let down = down_loss_l1(&q, &nb, &queue, 0.07).unwrap();
        assert_abs_diff_eq!(star.euclid_term, down, epsilon = 1e-10);
    }

    #[test]
    fn star_single_element_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_unit(&mut rng, 6);
        let h = random_unit(&mut rng, 6);
        let queue = queue_of(vec![h.clone()]);
        let nb = neighbor_set(&[0], 150.0, 1);
        let base = 10.0;
        let star = star_loss_l2(&q, &nb, &queue, &StarTerms::new(0.07, 0.0, base)).unwrap();
        let d = vecmath::bidirectional_kl(&q, &h, &ProbSpec::default());
        assert_abs_diff_eq!(star.euclid_term, d * base.ln(), epsilon = 1e-12);
        let expanded = expanded_l22(&q, &nb, &queue, 0.07, base, &ProbSpec::default()).unwrap();
        assert_abs_diff_eq!(expanded, d * base.ln(), epsilon = 1e-12);
    }

    #[test]
    fn star_matches_naive_product_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = random_unit(&mut rng, 8);
            let queue = queue_of((0..32).map(|_| random_unit(&mut rng, 8)).collect());
            let nb = neighbor_set(&[0, 5, 9, 31], 5.0, 4);
            let terms = StarTerms::new(0.07, rng.random_range(0.0..2.0), rng.random_range(1.5..20.0));
            let got = star_loss_l2(&q, &nb, &queue, &terms).unwrap();
            let (kl, eu) = naive_star(&q, &nb, &queue, &terms);
            assert_abs_diff_eq!(got.kl_term, kl, epsilon = 1e-8);
            assert_abs_diff_eq!(got.euclid_term, eu, epsilon = 1e-8);
        }
    }

    #[test]
    fn expanded_with_unit_base_is_plain_contrastive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_unit(&mut rng, 5);
        let queue = queue_of((0..10).map(|_| random_unit(&mut rng, 5)).collect());
        let nb = neighbor_set(&[2, 4], 2.0, 2);
        let expanded = expanded_l22(&q, &nb, &queue, 0.1, 1.0, &ProbSpec::default()).unwrap();
        assert_abs_diff_eq!(expanded, down_loss_l1(&q, &nb, &queue, 0.1).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn euclid_term_grows_as_negative_kl_grows() {
        // Two negatives with equal cosine to q but different coordinate
        // distributions: swapping the more divergent one in must not lower
        // the Euclidean term when B > 1.
        let q = vecmath::normalize(&[1.0, 0.0, 0.0]).unwrap();
        let pos = vecmath::normalize(&[0.95, 0.3, 0.0]).unwrap();
        let neg_similar_dist = vecmath::normalize(&[0.0, 0.7, 0.7]).unwrap();
        let neg_far_dist = vecmath::normalize(&[0.0, 1.0, -0.0]).unwrap();
        let spec = ProbSpec::default();
        let d_a = vecmath::bidirectional_kl(&q, &neg_similar_dist, &spec);
        let d_b = vecmath::bidirectional_kl(&q, &neg_far_dist, &spec);
        let (lo, hi) = if d_a < d_b {
            (neg_similar_dist, neg_far_dist)
        } else {
            (neg_far_dist, neg_similar_dist)
        };
        let nb = neighbor_set(&[0], 2.0, 1);
        let terms = StarTerms::new(0.07, 1.0, 10.0);
        let low = star_loss_l2(&q, &nb, &queue_of(vec![pos.clone(), lo]), &terms).unwrap();
        let high = star_loss_l2(&q, &nb, &queue_of(vec![pos, hi]), &terms).unwrap();
        assert!(high.euclid_term >= low.euclid_term);
    }

    #[test]
    fn ablation_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_unit(&mut rng, 8);
        let queue = queue_of((0..16).map(|_| random_unit(&mut rng, 8)).collect());
        let nb = neighbor_set(&[1, 2], 2.0, 2);
        let mut terms = StarTerms::new(0.07, 1.0, 10.0);
        terms.kl_loss = false;
        assert_eq!(star_loss_l2(&q, &nb, &queue, &terms).unwrap().kl_term, 0.0);
        terms.kl_loss = true;
        terms.kl_weight = false;
        let no_weight = star_loss_l2(&q, &nb, &queue, &terms).unwrap();
        assert!(no_weight.kl_term != 0.0);
        assert_abs_diff_eq!(
            no_weight.euclid_term,
            down_loss_l1(&q, &nb, &queue, 0.07).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn invalid_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_unit(&mut rng, 3);
        let queue = queue_of(vec![random_unit(&mut rng, 3)]);
        let nb = neighbor_set(&[0], 2.0, 1);
        assert!(down_loss_l1(&q, &nb, &queue, 0.0).is_err());
        assert!(star_loss_l2(&q, &nb, &queue, &StarTerms::new(0.07, 1.0, 0.0)).is_err());
        assert!(star_loss_l2(&q, &nb, &queue, &StarTerms::new(0.07, -1.0, 2.0)).is_err());
        let bad = neighbor_set(&[3], 2.0, 1);
        assert!(down_loss_l1(&q, &bad, &queue, 0.07).is_err());
        let empty = MomentumQueue::new(1).unwrap();
        assert!(down_loss_l1(&q, &nb, &empty, 0.07).is_err());
    }

    fn sample(id: u64, features: Vec<f64>, coarse: usize) -> LabeledSample {
        LabeledSample {
            id,
            features,
            coarse,
            fine: None,
            text: None,
        }
    }

    fn objective_config(objective: Objective) -> ObjectiveConfig {
        ObjectiveConfig {
            loss: LossConfig {
                objective,
                ..LossConfig::default()
            },
            retrieval: RetrievalConfig {
                k: 3,
                same_coarse_only: false,
            },
            alpha: AlphaSchedule::default(),
        }
    }

    #[test]
    fn batch_of_identical_samples_equals_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = init_encoder(4, &[6], 5, 2, 1).unwrap();
        let queue = queue_of((0..12).map(|_| random_unit(&mut rng, 5)).collect());
        let s = sample(100, vec![0.3, -0.1, 0.8, 0.2], 1);
        let batch = vec![&s, &s, &s];
        let cfg = objective_config(Objective::Star);
        let many = batch_objective(&params, &batch, Some(&queue), 0, &cfg).unwrap();
        let one = batch_objective(&params, &batch[..1], Some(&queue), 0, &cfg).unwrap();
        assert_abs_diff_eq!(many.total, one.total, epsilon = 1e-12);
        assert_abs_diff_eq!(many.total, many.ce + many.kl_term + many.euclid_term, epsilon = 1e-9);
    }

    #[test]
    fn batch_star_reduces_to_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = init_encoder(4, &[6], 5, 2, 1).unwrap();
        params.b_raw = 0.0;
        let queue = queue_of((0..12).map(|_| random_unit(&mut rng, 5)).collect());
        let samples: Vec<LabeledSample> = (0..4)
            .map(|i| sample(50 + i, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), (i % 2) as usize))
            .collect();
        let batch: Vec<&LabeledSample> = samples.iter().collect();
        let mut star = objective_config(Objective::Star);
        star.loss.gamma = 0.0;
        let down = objective_config(Objective::Down);
        let a = batch_objective(&params, &batch, Some(&queue), 3, &star).unwrap();
        let b = batch_objective(&params, &batch, Some(&queue), 3, &down).unwrap();
        assert_abs_diff_eq!(a.total, b.total, epsilon = 1e-10);
        assert_abs_diff_eq!(a.contrastive, b.contrastive, epsilon = 1e-10);
        assert_abs_diff_eq!(b.total, b.ce + b.contrastive, epsilon = 1e-12);
    }

    #[test]
    fn two_sample_batch_is_mean_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = init_encoder(4, &[6], 5, 2, 2).unwrap();
        let queue = queue_of((0..12).map(|_| random_unit(&mut rng, 5)).collect());
        let a = sample(1000, vec![0.1, 0.2, 0.3, 0.4], 0);
        let b = sample(1001, vec![-0.5, 0.2, 0.9, -0.4], 1);
        let cfg = objective_config(Objective::Down);
        let both = batch_objective(&params, &[&a, &b], Some(&queue), 0, &cfg).unwrap();
        let la = batch_objective(&params, &[&a], Some(&queue), 0, &cfg).unwrap();
        let lb = batch_objective(&params, &[&b], Some(&queue), 0, &cfg).unwrap();
        assert_abs_diff_eq!(both.ce, (la.ce + lb.ce) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(both.contrastive, (la.contrastive + lb.contrastive) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(both.total, (la.total + lb.total) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn pretrain_needs_no_queue() {
        let params = init_encoder(4, &[6], 5, 3, 2).unwrap();
        let a = sample(1, vec![0.1, 0.2, 0.3, 0.4], 2);
        let cfg = objective_config(Objective::Pretrain);
        let loss = batch_objective(&params, &[&a], None, 0, &cfg).unwrap();
        assert_eq!(loss.contrastive, 0.0);
        assert_eq!(loss.total, loss.ce);
        let bad = sample(2, vec![0.1, 0.2, 0.3, 0.4], 3);
        assert!(batch_objective(&params, &[&bad], None, 0, &cfg).is_err());
        assert!(batch_objective(&params, &[], None, 0, &cfg).is_err());
    }
}
