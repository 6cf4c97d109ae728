use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use star_core::data::LabeledSample;
use star_core::encoder::{init_encoder, EncoderParams};
use star_core::neighborhood::{retrieve_neighbors, MomentumQueue, NeighborSet, QueueEntry, RetrievalConfig};
use star_core::objective::{compute_gradients_with_neighbors, LossConfig, Objective};
use star_core::vecmath::normalize;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

struct Instance {
    params: EncoderParams,
    batch: Vec<LabeledSample>,
    queue: MomentumQueue,
    neighbors: Vec<NeighborSet>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn instance(seed: u64, b_raw: f64) -> Instance {
    let (d_in, d, m, q_len, k) = (8, 8, 2, 32, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_encoder(d_in, &[8], d, m, seed).unwrap();
    params.b_raw = b_raw;
    let batch: Vec<LabeledSample> = (0..4)
        .map(|i| LabeledSample {
            id: i,
            features: gaussian(&mut rng, d_in),
            coarse: (i % 2) as usize,
            fine: None,
            text: None,
        })
        .collect();
    let mut queue = MomentumQueue::new(q_len).unwrap();
    queue.push((0..q_len as u64).map(|i| QueueEntry {
        sample_id: 100 + i,
        embedding: normalize(&gaussian(&mut rng, d)).unwrap(),
        coarse_label: (i % 2) as usize,
    }));
    let retrieval = RetrievalConfig {
        k,
        same_coarse_only: false,
    };
    let neighbors = batch
        .iter()
        .map(|s| {
            let q = params.encode(&s.features).unwrap();
            retrieve_neighbors(&q, s.id, Some(s.coarse), &queue, &retrieval, 4.0).unwrap()
        })
        .collect();
    Instance {
        params,
        batch,
        queue,
        neighbors,
    }
}

fn loss_at(inst: &Instance, flat: &[f64], cfg: &LossConfig) -> f64 {
    let mut p = inst.params.clone();
    p.set_flat(flat).unwrap();
    let batch: Vec<&LabeledSample> = inst.batch.iter().collect();
    compute_gradients_with_neighbors(&p, &batch, Some(&inst.queue), Some(&inst.neighbors), cfg)
        .unwrap()
        .0
        .total
}

/// Worst relative error between the analytic gradient and central
/// differences. Entries where both are below 1e-7 in magnitude are compared
/// absolutely.
fn worst_relative_error(inst: &Instance, cfg: &LossConfig) -> (f64, usize) {
    let batch: Vec<&LabeledSample> = inst.batch.iter().collect();
    let (_, grad) =
        compute_gradients_with_neighbors(&inst.params, &batch, Some(&inst.queue), Some(&inst.neighbors), cfg)
            .unwrap();
    let base = inst.params.to_flat();
    let mut worst = (0.0, 0);
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += STEP;
        let mut minus = base.clone();
        minus[i] -= STEP;
        let fd = (loss_at(inst, &plus, cfg) - loss_at(inst, &minus, cfg)) / (2.0 * STEP);
        let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-7);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

fn config(objective: Objective) -> LossConfig {
    LossConfig {
        objective,
        ..LossConfig::default()
    }
}

#[test]
fn ce_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let inst = instance(seed, 10f64.ln());
        let (err, at) = worst_relative_error(&inst, &config(Objective::Pretrain));
        assert!(err <= TOL, "seed {seed}: relative error {err:e} at parameter {at}");
    }
}

#[test]
fn down_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let inst = instance(seed, 10f64.ln());
        let (err, at) = worst_relative_error(&inst, &config(Objective::Down));
        assert!(err <= TOL, "seed {seed}: relative error {err:e} at parameter {at}");
    }
}

#[test]
fn star_gradient_matches_finite_differences() {
    for (seed, b_raw) in [(0, 10f64.ln()), (1, 1.0), (2, 16f64.ln()), (3, -0.5)] {
        let inst = instance(seed, b_raw);
        let (err, at) = worst_relative_error(&inst, &config(Objective::Star));
        assert!(err <= TOL, "seed {seed}: relative error {err:e} at parameter {at}");
    }
}

#[test]
fn b_raw_gradient_is_checked_and_nonzero() {
    let inst = instance(7, 10f64.ln());
    let batch: Vec<&LabeledSample> = inst.batch.iter().collect();
    let cfg = config(Objective::Star);
    let (_, grad) =
        compute_gradients_with_neighbors(&inst.params, &batch, Some(&inst.queue), Some(&inst.neighbors), &cfg)
            .unwrap();
    let b = inst.params.b_raw_index();
    assert!(grad[b].abs() > 1e-6);
    let mut plus = inst.params.to_flat();
    plus[b] += STEP;
    let mut minus = inst.params.to_flat();
    minus[b] -= STEP;
    let fd = (loss_at(&inst, &plus, &cfg) - loss_at(&inst, &minus, &cfg)) / (2.0 * STEP);
    assert!((grad[b] - fd).abs() / fd.abs() <= TOL);

    // DOWN does not depend on B.
    let (_, grad) = compute_gradients_with_neighbors(
        &inst.params,
        &batch,
        Some(&inst.queue),
        Some(&inst.neighbors),
        &config(Objective::Down),
    )
    .unwrap();
    assert_eq!(grad[b], 0.0);
}

#[test]
fn ablations_keep_gradients_exact() {
    let inst = instance(11, 10f64.ln());
    for cfg in [
        LossConfig {
            use_ce: false,
            ..config(Objective::Star)
        },
        LossConfig {
            kl_loss: false,
            ..config(Objective::Star)
        },
        LossConfig {
            kl_weight: false,
            ..config(Objective::Star)
        },
    ] {
        let (err, at) = worst_relative_error(&inst, &cfg);
        assert!(err <= TOL, "{cfg:?}: relative error {err:e} at parameter {at}");
    }
}
