use cgdp::numerics::seeded_rng;
use cgdp::par::{map_indexed, map_indexed_sequential};
use cgdp::verify::{check_prop2, prop2_instance};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

// One Monte Carlo gradient estimate per seed, a typical sweep item.
fn work(seed: u64) -> f64 {
    let (dynamics, s, a) = prop2_instance(seed).unwrap();
    check_prop2(&dynamics, &s, &a, 2000, &mut seeded_rng(seed))
        .unwrap()
        .cosine
}

fn sweeps(c: &mut Criterion) {
    let mut group = c.benchmark_group("seed_sweep");
    group.sample_size(10);
    for seeds in [4u64, 16] {
        let items: Vec<u64> = (0..seeds).collect();
        group.bench_with_input(BenchmarkId::new("parallel", seeds), &items, |b, items| {
            b.iter(|| map_indexed(black_box(items), |_, &s| work(s)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", seeds), &items, |b, items| {
            b.iter(|| map_indexed_sequential(black_box(items), |_, &s| work(s)))
        });
    }
    group.finish();
}

criterion_group!(benches, sweeps);
criterion_main!(benches);
