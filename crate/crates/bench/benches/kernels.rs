use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsqlora::quality::{draw_minibatch, score_pool};
use tsqlora::{allocate, AllocatorConfig, DataSubset, QualityConfig, Tensor};
use tsqlora_bench::{live_state, pool};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let a = Tensor::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let b = Tensor::from_fn(n, n, |i, j| ((i + 2 * j) % 5) as f64 * 0.1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let state = live_state(4);
    let data = pool(64);
    let batch = data.as_batch();
    let one = data.sample(0);
    c.bench_function("gradient/batch64", |b| b.iter(|| state.gradient(black_box(&batch), false).unwrap()));
    c.bench_function("gradient/per_sample", |b| {
        b.iter(|| state.per_sample_gradient(black_box(&one), false).unwrap())
    });
    c.bench_function("gradient/per_sample_probe", |b| {
        b.iter(|| state.per_sample_gradient(black_box(&one), true).unwrap())
    });
}

fn allocation(c: &mut Criterion) {
    let mut group = c.benchmark_group("allocate");
    for layers in [3usize, 12, 48] {
        let ids: Vec<usize> = (0..layers).collect();
        let s: Vec<f64> = (0..layers).map(|i| 0.001 + 0.998 * ((i * 37) % layers) as f64 / layers as f64).collect();
        let cfg = AllocatorConfig {
            r_init: 4,
            ..AllocatorConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(layers), &layers, |b, _| {
            b.iter(|| allocate(&ids, black_box(&s), 1.2, &cfg).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let n = 1600u64;
    let scores: Vec<f64> = (0..n).map(|i| ((i * 2654435761) % 1000) as f64 / 250.0 - 2.0).collect();
    let weights: Vec<f64> = scores.iter().map(|q| (q / 0.7).exp()).collect();
    let total: f64 = weights.iter().sum();
    let subset = DataSubset {
        ids: (0..n).collect(),
        probs: weights.iter().map(|w| w / total).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("draw_minibatch/1600x64", |b| {
        b.iter(|| draw_minibatch(black_box(&subset), 64, &mut rng).unwrap())
    });
}

fn scoring(c: &mut Criterion) {
    let state = live_state(4);
    let data = pool(400);
    let cfg = QualityConfig::default();
    let mut group = c.benchmark_group("score_pool/400");
    group.sample_size(10);
    for threads in [1usize, 4] {
        group.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, &t| {
            b.iter(|| score_pool(&state, &data, &cfg, None, t).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, gradients, allocation, sampling, scoring);
criterion_main!(benches);
