//! Default worker pool against a single worker on the data-parallel kernels.
//!
//! With `--no-default-features` both variants run the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lulc_core::infer::majority_filter_classes;
use lulc_core::nn::gradcheck::random_tensor;
use lulc_core::nn::{conv2d_forward, Network, NetworkConfig};
use lulc_core::par;

fn variants() -> [(&'static str, usize); 2] {
    [("pool", par::current_threads()), ("one_thread", 1)]
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&[16, 16, 32, 32], &mut rng).cast::<f32>();
    let k = random_tensor(&[32, 16, 3, 3], &mut rng).cast::<f32>();
    let mut g = c.benchmark_group("conv2d_forward");
    for (name, threads) in variants() {
        g.bench_function(BenchmarkId::new(name, threads), |b| {
            par::with_threads(threads, || b.iter(|| conv2d_forward(&x, &k, 1, 1).unwrap()))
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let cfg = NetworkConfig {
        input_size: 32,
        ..NetworkConfig::default()
    };
    let net = Network::<f32>::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&[16, 3, 32, 32], &mut rng).cast::<f32>();
    let mut g = c.benchmark_group("network_predict");
    g.sample_size(10);
    for (name, threads) in variants() {
        g.bench_function(BenchmarkId::new(name, threads), |b| {
            par::with_threads(threads, || b.iter(|| net.predict(&x).unwrap()))
        });
    }
    g.finish();
}

fn filter(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rows, cols) = (256, 256);
    let grid: Vec<Option<u8>> = (0..rows * cols)
        .map(|_| (!rng.random_bool(0.1)).then(|| rng.random_range(0..10u8)))
        .collect();
    let mut g = c.benchmark_group("majority_filter");
    for (name, threads) in variants() {
        g.bench_function(BenchmarkId::new(name, threads), |b| {
            par::with_threads(threads, || b.iter(|| majority_filter_classes(&grid, rows, cols)))
        });
    }
    g.finish();
}

criterion_group!(benches, conv, forward, filter);
criterion_main!(benches);
