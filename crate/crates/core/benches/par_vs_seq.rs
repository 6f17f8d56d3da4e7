//! Parallel vs sequential throughput on the identification workloads.
//!
//! Build with the default `parallel` feature for the rayon path and with
//! `--no-default-features` for the sequential fallback; group names carry
//! the mode so the two runs can be compared side by side:
//!
//! ```text
//! cargo bench -p cellpush
//! cargo bench -p cellpush --no-default-features
//! ```

use criterion::{criterion_group, criterion_main, Criterion};

use cellpush::ident::{self, IdentConfig};
use cellpush::scen;

fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "par"
    } else {
        "seq"
    }
}

fn bench_batch_loss(c: &mut Criterion) {
    let sc = scen::make_archetype("hammer", 25, 1).unwrap();
    let ds = scen::generate_data(&sc).unwrap();
    let mut group = c.benchmark_group(format!("batch_loss/{}", mode()));
    group.sample_size(20);
    group.bench_function("train4_k25", |b| {
        b.iter(|| ident::loss(&sc.true_params, &ds.train, &sc.grid).unwrap())
    });
    group.finish();
}

fn bench_random_search(c: &mut Criterion) {
    let sc = scen::make_archetype("book", 25, 2).unwrap();
    let ds = scen::generate_data(&sc).unwrap();
    let config = IdentConfig {
        seed: 3,
        ..IdentConfig::default()
    };
    let mut group = c.benchmark_group(format!("random_search/{}", mode()));
    group.sample_size(10);
    group.bench_function("budget64_k25", |b| {
        b.iter(|| ident::identify_random(&sc.grid, &ds.train, &config, 64, None).unwrap())
    });
    group.finish();
}

fn bench_finite_diff_epoch(c: &mut Criterion) {
    let sc = scen::make_archetype("uniform", 9, 4).unwrap();
    let ds = scen::generate_data(&sc).unwrap();
    let config = IdentConfig {
        seed: 5,
        max_epochs: 1,
        loss_threshold: 0.0,
        ..IdentConfig::default()
    };
    let mut group = c.benchmark_group(format!("finite_diff_epoch/{}", mode()));
    group.sample_size(10);
    group.bench_function("k9", |b| {
        b.iter(|| ident::identify_finite_diff(&sc.grid, &ds.train, &config, 1e-4, None).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_batch_loss,
    bench_random_search,
    bench_finite_diff_epoch
);
criterion_main!(benches);
