use countloss::countdp::{
    batch_count_distributions, batch_count_distributions_sequential, count_log_prob, InstanceScores,
};
use countloss::oracle::brute_force_count_distribution;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random_bags(n: usize, k: usize, seed: u64) -> Vec<InstanceScores> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..0.99)).collect();
            InstanceScores::from_probs(&p).unwrap()
        })
        .collect()
}

fn batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_count_distributions");
    for k in [32, 128] {
        let bags = random_bags(256, k, k as u64);
        group.bench_with_input(BenchmarkId::new("parallel", k), &bags, |b, bags| {
            b.iter(|| batch_count_distributions(black_box(bags)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", k), &bags, |b, bags| {
            b.iter(|| batch_count_distributions_sequential(black_box(bags)))
        });
    }
    group.finish();
}

fn truncated(c: &mut Criterion) {
    let mut group = c.benchmark_group("count_log_prob_s8");
    for k in [64, 256, 512] {
        let scores = random_bags(1, k, 7).remove(0);
        group.bench_with_input(BenchmarkId::from_parameter(k), &scores, |b, s| {
            b.iter(|| count_log_prob(black_box(s), 8).unwrap())
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p: Vec<f64> = (0..16).map(|_| rng.random()).collect();
    c.bench_function("brute_force_k16", |b| {
        b.iter(|| brute_force_count_distribution(black_box(&p)).unwrap())
    });
}

criterion_group!(benches, batch, truncated, oracle);
criterion_main!(benches);
