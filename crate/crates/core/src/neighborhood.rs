//! Momentum-feature queue, exact top-k neighbor retrieval, and rank-based
//! soft weighting of the retrieved neighbors.

use std::cmp::Ordering;
use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath::{self, UnitEmbedding};

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub sample_id: u64,
    pub embedding: UnitEmbedding,
    pub coarse_label: usize,
}

/// Bounded FIFO of momentum-encoder features. Sample ids are unique.
#[derive(Debug, Clone)]
pub struct MomentumQueue {
    entries: VecDeque<QueueEntry>,
    ids: HashSet<u64>,
    capacity: usize,
}

impl MomentumQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("queue capacity must be >= 1".into()));
        }
        Ok(MomentumQueue {
            entries: VecDeque::with_capacity(capacity),
            ids: HashSet::with_capacity(capacity),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&QueueEntry> {
        self.entries.get(index)
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn contains(&self, sample_id: u64) -> bool {
        self.ids.contains(&sample_id)
    }

    /// Appends `batch` in order. An entry whose id is already queued
    /// replaces the stale embedding in place; new ids evict from the front
    /// once the queue is full.
    pub fn push(&mut self, batch: impl IntoIterator<Item = QueueEntry>) {
        for entry in batch {
            if self.ids.contains(&entry.sample_id) {
                let slot = self
                    .entries
                    .iter_mut()
                    .find(|e| e.sample_id == entry.sample_id)
                    .expect("id set and entries agree");
                *slot = entry;
                continue;
            }
            if self.entries.len() == self.capacity {
                let evicted = self.entries.pop_front().expect("capacity >= 1");
                self.ids.remove(&evicted.sample_id);
            }
            self.ids.insert(entry.sample_id);
            self.entries.push_back(entry);
        }
    }
}

/// Functional form of [`MomentumQueue::push`].
pub fn queue_push(queue: &MomentumQueue, batch: Vec<QueueEntry>) -> MomentumQueue {
    let mut next = queue.clone();
    next.push(batch);
    next
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    /// Position in the queue snapshot the set was retrieved from.
    pub queue_index: usize,
    pub sample_id: u64,
    pub similarity: f64,
    /// 1-based rank in descending similarity.
    pub rank: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Neighbor> {
        self.neighbors.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    /// Only consider queue entries sharing the query's coarse label.
    pub same_coarse_only: bool,
}

/// Exact top-k retrieval by cosine similarity, excluding `query_id`.
/// Ties go to the lower sample id. Weights come from [`rank_weights`] with
/// `alpha`.
pub fn retrieve_neighbors(
    q: &UnitEmbedding,
    query_id: u64,
    query_coarse: Option<usize>,
    queue: &MomentumQueue,
    config: &RetrievalConfig,
    alpha: f64,
) -> Result<NeighborSet> {
    if config.k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let mut scored: Vec<(usize, u64, f64)> = queue
        .iter()
        .enumerate()
        .filter(|(_, e)| e.sample_id != query_id)
        .filter(|(_, e)| match (config.same_coarse_only, query_coarse) {
            (true, Some(c)) => e.coarse_label == c,
            _ => true,
        })
        .map(|(i, e)| (i, e.sample_id, vecmath::cosine_sim(q, &e.embedding)))
        .collect();
    if scored.is_empty() {
        return Err(Error::Empty(format!(
            "no retrieval candidates for query {query_id}"
        )));
    }
    let order = |a: &(usize, u64, f64), b: &(usize, u64, f64)| -> Ordering {
        b.2.total_cmp(&a.2).then(a.1.cmp(&b.1))
    };
    let take = config.k.min(scored.len());
    if take < scored.len() {
        scored.select_nth_unstable_by(take - 1, order);
        scored.truncate(take);
    }
    scored.sort_by(order);

    let ranks: Vec<usize> = (1..=take).collect();
    let weights = rank_weights(&ranks, alpha, config.k)?;
    let neighbors = scored
        .into_iter()
        .zip(ranks.into_iter().zip(weights))
        .map(|((queue_index, sample_id, similarity), (rank, weight))| Neighbor {
            queue_index,
            sample_id,
            similarity,
            rank,
            weight,
        })
        .collect();
    Ok(NeighborSet { neighbors })
}

/// `ω_j ∝ α^(−rank_j / k)`, normalized to sum to one.
pub fn rank_weights(ranks: &[usize], alpha: f64, k: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::Empty("ranks".into()));
    }
    let ln_alpha = alpha.ln();
    let raw: Vec<f64> = ranks
        .iter()
        .map(|&r| (-(r as f64) / k as f64 * ln_alpha).exp())
        .collect();
    let total = vecmath::stable_sum(&raw);
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Staged α: each value holds for `period` epochs, the last one forever.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub stages: Vec<f64>,
    pub period: usize,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            stages: vec![150.0, 10.0, 5.0, 2.0],
            period: 5,
        }
    }
}

impl AlphaSchedule {
    pub fn alpha(&self, epoch: usize) -> f64 {
        let stage = (epoch / self.period.max(1)).min(self.stages.len() - 1);
        self.stages[stage]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.period == 0 {
            return Err(Error::config("alpha_schedule", "needs >= 1 stage and period >= 1"));
        }
        if self.stages.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::config("alpha_schedule", "every alpha must be finite and > 0"));
        }
        Ok(())
    }
}

/// α for a zero-based training epoch under the default schedule.
pub fn alpha_for_epoch(epoch: usize) -> f64 {
    AlphaSchedule::default().alpha(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(id: u64, v: &[f64]) -> QueueEntry {
        QueueEntry {
            sample_id: id,
            embedding: vecmath::normalize(v).unwrap(),
            coarse_label: 0,
        }
    }

    fn ids(q: &MomentumQueue) -> Vec<u64> {
        q.iter().map(|e| e.sample_id).collect()
    }

    #[test]
    fn fifo_eviction() {
        let mut q = MomentumQueue::new(3).unwrap();
        q.push((0..4).map(|i| entry(i, &[1.0, i as f64])));
        assert_eq!(ids(&q), vec![1, 2, 3]);
    }

    #[test]
    fn replacement_in_place() {
        let mut q = MomentumQueue::new(3).unwrap();
        q.push(vec![entry(1, &[1.0, 0.0]), entry(2, &[0.0, 1.0])]);
        q.push(vec![entry(1, &[0.0, 1.0])]);
        assert_eq!(q.len(), 2);
        assert_eq!(ids(&q), vec![1, 2]);
        assert_eq!(q.get(0).unwrap().embedding.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn empty_push_is_noop() {
        let mut q = MomentumQueue::new(2).unwrap();
        q.push(vec![entry(5, &[1.0, 0.0])]);
        let next = queue_push(&q, Vec::new());
        assert_eq!(ids(&next), vec![5]);
        assert!(MomentumQueue::new(0).is_err());
    }

    fn cfg(k: usize) -> RetrievalConfig {
        RetrievalConfig {
            k,
            same_coarse_only: false,
        }
    }

    #[test]
    fn k_exceeding_queue() {
        let mut q = MomentumQueue::new(10).unwrap();
        q.push(vec![entry(1, &[1.0, 0.0]), entry(2, &[0.0, 1.0])]);
        let query = vecmath::normalize(&[1.0, 0.2]).unwrap();
        let set = retrieve_neighbors(&query, 99, None, &q, &cfg(5), 2.0).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.neighbors[0].sample_id, 1);
        assert_eq!(set.neighbors[0].rank, 1);
        assert_eq!(set.neighbors[1].rank, 2);
    }

    #[test]
    fn self_is_excluded() {
        let mut q = MomentumQueue::new(10).unwrap();
        q.push(vec![entry(1, &[1.0, 0.0]), entry(2, &[0.0, 1.0])]);
        let query = vecmath::normalize(&[1.0, 0.0]).unwrap();
        let set = retrieve_neighbors(&query, 1, None, &q, &cfg(5), 2.0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.neighbors[0].sample_id, 2);

        let mut only_self = MomentumQueue::new(2).unwrap();
        only_self.push(vec![entry(1, &[1.0, 0.0])]);
        assert!(retrieve_neighbors(&query, 1, None, &only_self, &cfg(1), 2.0).is_err());
    }

    #[test]
    fn ties_break_by_lower_id() {
        let mut q = MomentumQueue::new(10).unwrap();
        q.push(vec![entry(7, &[1.0, 0.0]), entry(3, &[1.0, 0.0]), entry(5, &[0.0, 1.0])]);
        let query = vecmath::normalize(&[1.0, 0.0]).unwrap();
        let set = retrieve_neighbors(&query, 99, None, &q, &cfg(2), 2.0).unwrap();
        let got: Vec<u64> = set.iter().map(|n| n.sample_id).collect();
        assert_eq!(got, vec![3, 7]);
    }

    #[test]
    fn same_coarse_filter() {
        let mut q = MomentumQueue::new(10).unwrap();
        let mut a = entry(1, &[1.0, 0.0]);
        a.coarse_label = 1;
        q.push(vec![a, entry(2, &[0.9, 0.1])]);
        let query = vecmath::normalize(&[1.0, 0.0]).unwrap();
        let config = RetrievalConfig {
            k: 5,
            same_coarse_only: true,
        };
        let set = retrieve_neighbors(&query, 99, Some(0), &q, &config, 2.0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.neighbors[0].sample_id, 2);
    }

    #[test]
    fn weights_hand_values() {
        let w = rank_weights(&[1, 2], 4.0, 2).unwrap();
        assert_abs_diff_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 1.0 / 3.0, epsilon = 1e-15);
        let flat = rank_weights(&[1, 2, 3, 4], 1.0, 4).unwrap();
        assert!(flat.iter().all(|&x| x == 0.25));
        assert!(rank_weights(&[1], 0.0, 1).is_err());
        assert!(rank_weights(&[1], -2.0, 1).is_err());
    }

    #[test]
    fn alpha_schedule_stages() {
        assert_eq!(alpha_for_epoch(0), 150.0);
        assert_eq!(alpha_for_epoch(4), 150.0);
        assert_eq!(alpha_for_epoch(5), 10.0);
        assert_eq!(alpha_for_epoch(7), 10.0);
        assert_eq!(alpha_for_epoch(12), 5.0);
        assert_eq!(alpha_for_epoch(15), 2.0);
        assert_eq!(alpha_for_epoch(40), 2.0);
    }

    #[test]
    fn retrieval_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let n = rng.random_range(2..=256usize);
            let d = rng.random_range(2..=8usize);
            let mut q = MomentumQueue::new(n).unwrap();
            for i in 0..n {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                q.push(vec![entry(i as u64 * 3 + 1, &v)]);
            }
            let query_v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let query = vecmath::normalize(&query_v).unwrap();
            let k = rng.random_range(1..=10usize);
            let set = retrieve_neighbors(&query, u64::MAX, None, &q, &cfg(k), 5.0).unwrap();

            let mut brute: Vec<(u64, f64)> = q
                .iter()
                .map(|e| (e.sample_id, vecmath::dot(query.as_slice(), e.embedding.as_slice())))
                .collect();
            brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expected: Vec<u64> = brute.iter().take(k).map(|x| x.0).collect();
            let got: Vec<u64> = set.iter().map(|n| n.sample_id).collect();
            assert_eq!(got, expected, "trial {trial}");
            let sum: f64 = set.iter().map(|n| n.weight).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn weights_decrease_and_sum_to_one(alpha in 1.0001f64..500.0, k in 1usize..40) {
            let ranks: Vec<usize> = (1..=k).collect();
            let w = rank_weights(&ranks, alpha, k).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for pair in w.windows(2) {
                prop_assert!(pair[0] > pair[1]);
            }
        }

        #[test]
        fn queue_matches_reference_deque(
            capacity in 1usize..8,
            pushes in prop::collection::vec(prop::collection::vec(0u64..12, 0..6), 0..12),
        ) {
            let mut queue = MomentumQueue::new(capacity).unwrap();
            let mut reference: VecDeque<u64> = VecDeque::new();
            for batch in pushes {
                for &id in &batch {
                    if !reference.contains(&id) {
                        if reference.len() == capacity {
                            reference.pop_front();
                        }
                        reference.push_back(id);
                    }
                }
                queue.push(batch.iter().map(|&id| entry(id, &[1.0, id as f64])));
                prop_assert!(queue.len() <= capacity);
                prop_assert_eq!(ids(&queue), reference.iter().copied().collect::<Vec<_>>());
            }
        }
    }
}
