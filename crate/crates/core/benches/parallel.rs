//! Default rayon pool against a single-worker pool on the hot kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mrsynth::fusion::{fuse, ChannelEcho, FusionMode};
use mrsynth::metrics::ssim_map_3d;
use mrsynth::nn::Conv2d;
use mrsynth::par::{current_threads, with_threads};
use mrsynth::phantom::{generate_case, PhantomSpec};
use mrsynth::volume::Sequence;

fn pools() -> Vec<(&'static str, usize)> {
    vec![("sequential", 1), ("pool", current_threads())]
}

fn conv_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conv = Conv2d::normal(32, 32, 3, 1, 1, 0.05, &mut rng);
    let x = Array4::from_shape_fn((8, 32, 32, 32), |(n, ch, i, j)| ((n + ch * 3 + i * 7 + j * 11) % 17) as f64 / 17.0);
    let mut g = c.benchmark_group("conv_forward");
    for (name, threads) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(threads, || conv.forward(&x)))
        });
    }
    g.finish();
}

fn fusion(c: &mut Criterion) {
    let case = generate_case(&PhantomSpec::cube(32, 1), "BENCH").unwrap();
    let gen = ChannelEcho { channel: 1 };
    let mut g = c.benchmark_group("fuse_nine");
    g.sample_size(10);
    for (name, threads) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(threads, || fuse(&gen, &case, Sequence::T2f, FusionMode::Nine, 16).unwrap()))
        });
    }
    g.finish();
}

fn ssim_3d(c: &mut Criterion) {
    let case = generate_case(&PhantomSpec::cube(48, 2), "BENCH").unwrap();
    let a: Array3<f64> = case.sequences[&Sequence::T1n].data.mapv(f64::from);
    let b: Array3<f64> = case.sequences[&Sequence::T2w].data.mapv(f64::from);
    let mut g = c.benchmark_group("ssim_3d");
    g.sample_size(10);
    for (name, threads) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| with_threads(threads, || ssim_map_3d(&a, &b).unwrap()))
        });
    }
    g.finish();
}

fn phantom(c: &mut Criterion) {
    let spec = PhantomSpec::cube(48, 3);
    let mut g = c.benchmark_group("phantom_case");
    g.sample_size(10);
    for (name, threads) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(threads, || generate_case(&spec, "BENCH").unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, conv_forward, fusion, ssim_3d, phantom);
criterion_main!(benches);
