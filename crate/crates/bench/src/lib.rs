//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use star_core::data::LabeledSample;
use star_core::neighborhood::{MomentumQueue, QueueEntry};
use star_core::vecmath::normalize;
use star_core::UnitEmbedding;

pub fn unit_vectors(n: usize, d: usize, seed: u64) -> Vec<UnitEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            normalize(&v).expect("gaussian vector is nonzero")
        })
        .collect()
}

pub fn queue(n: usize, d: usize, n_coarse: usize, seed: u64) -> MomentumQueue {
    let mut q = MomentumQueue::new(n).expect("capacity > 0");
    q.push(unit_vectors(n, d, seed).into_iter().enumerate().map(|(i, embedding)| QueueEntry {
        sample_id: 1_000_000 + i as u64,
        embedding,
        coarse_label: i % n_coarse,
    }));
    q
}

pub fn samples(n: usize, d_in: usize, n_coarse: usize, seed: u64) -> Vec<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u64)
        .map(|id| LabeledSample {
            id,
            features: (0..d_in).map(|_| rng.sample(StandardNormal)).collect(),
            coarse: id as usize % n_coarse,
            fine: None,
            text: None,
        })
        .collect()
}

/// Random labels in `0..k`.
pub fn labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}
