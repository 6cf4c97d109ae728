use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use star_bench::{labels, queue, samples, unit_vectors};
use star_core::data::LabeledSample;
use star_core::encoder::init_encoder;
use star_core::inference::kmeans;
use star_core::metrics::{ari, hungarian_accuracy, nmi, silhouette};
use star_core::neighborhood::{AlphaSchedule, RetrievalConfig};
use star_core::objective::{compute_gradients, LossConfig, Objective, ObjectiveConfig};
use star_core::neighborhood::retrieve_neighbors;

fn objective(kind: Objective) -> ObjectiveConfig {
    ObjectiveConfig {
        loss: LossConfig {
            objective: kind,
            ..LossConfig::default()
        },
        retrieval: RetrievalConfig {
            k: 50,
            same_coarse_only: true,
        },
        alpha: AlphaSchedule::default(),
    }
}

fn gradients(c: &mut Criterion) {
    let params = init_encoder(32, &[64], 16, 3, 0).unwrap();
    let q = queue(2048, 16, 3, 1);
    let batch_data = samples(64, 32, 3, 2);
    let batch: Vec<&LabeledSample> = batch_data.iter().collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(20);
    for kind in [Objective::Pretrain, Objective::Down, Objective::Star] {
        let cfg = objective(kind);
        group.bench_function(BenchmarkId::from_parameter(kind), |b| {
            b.iter(|| compute_gradients(&params, black_box(&batch), Some(&q), 0, &cfg).unwrap())
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieve_neighbors");
    let query = unit_vectors(1, 16, 9).pop().unwrap();
    let cfg = RetrievalConfig {
        k: 50,
        same_coarse_only: false,
    };
    for n in [1024, 8192] {
        let q = queue(n, 16, 3, 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &q, |b, q| {
            b.iter(|| retrieve_neighbors(black_box(&query), 0, None, q, &cfg, 150.0).unwrap())
        });
    }
    group.finish();
}

fn clustering(c: &mut Criterion) {
    let points = unit_vectors(1800, 16, 4);
    let mut group = c.benchmark_group("clustering");
    group.sample_size(10);
    group.bench_function("kmeans_1800x16_k9", |b| b.iter(|| kmeans(black_box(&points), 9, 5).unwrap()));
    let assign = labels(1800, 9, 6);
    group.bench_function("silhouette_1800x16", |b| {
        b.iter(|| silhouette(black_box(&points), &assign).unwrap())
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let pred = labels(10_000, 50, 7);
    let truth = labels(10_000, 50, 8);
    let mut group = c.benchmark_group("metrics");
    group.bench_function("hungarian_acc_10k_k50", |b| {
        b.iter(|| hungarian_accuracy(black_box(&pred), &truth).unwrap())
    });
    group.bench_function("ari_10k", |b| b.iter(|| ari(black_box(&pred), &truth).unwrap()));
    group.bench_function("nmi_10k", |b| b.iter(|| nmi(black_box(&pred), &truth).unwrap()));
    group.finish();
}

criterion_group!(benches, gradients, retrieval, clustering, metrics);
criterion_main!(benches);
