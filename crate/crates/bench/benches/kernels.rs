use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use mgan_core::config::RunConfig;
use mgan_core::conv::{conv3d_forward, ConvGeom};
use mgan_core::networks::Generator;
use mgan_core::training::{pretrain_step, TrainState};
use mgan_core::wavelet::{bior13_filter_bank, WaveletKernels};
use mgan_core::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d_3x3x3");
    for (cin, cout, n) in [(1, 16, 32), (16, 16, 16), (16, 16, 32)] {
        let x = random(&[cin, n, n, n], 1);
        let w = random(&[cout, cin, 3, 3, 3], 2);
        let g = ConvGeom::conv([n; 3], 3, 1, 1).unwrap();
        group.bench_function(BenchmarkId::from_parameter(format!("{cin}to{cout}_{n}")), |b| {
            b.iter(|| conv3d_forward(black_box(&x), &w, None, &g).unwrap())
        });
    }
    group.finish();
}

fn wavelet(c: &mut Criterion) {
    let k = WaveletKernels::<f32>::new(&bior13_filter_bank());
    let mut group = c.benchmark_group("dwt3");
    for (ch, n) in [(1, 32), (8, 32), (1, 64)] {
        let x = random(&[ch, n, n, n], 3);
        let bands = k.analyze(&x).unwrap();
        group.bench_function(BenchmarkId::new("analyze", format!("{ch}x{n}")), |b| {
            b.iter(|| k.analyze(black_box(&x)).unwrap())
        });
        group.bench_function(BenchmarkId::new("synthesize", format!("{ch}x{n}")), |b| {
            b.iter(|| k.synthesize(black_box(&bands)).unwrap())
        });
    }
    group.finish();
}

fn generator(c: &mut Criterion) {
    let cfg = RunConfig::desk();
    let g = Generator::init(cfg.generator.clone(), 0).unwrap();
    let x = random(&[1, 32, 32, 32], 4).map(|v| v * 0.9);
    c.bench_function("generator_forward_desk_32", |b| b.iter(|| g.infer(black_box(&x), None).unwrap()));

    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    let mut state = TrainState::new(cfg, String::new()).unwrap();
    let y = x.map(|v| -v);
    group.bench_function("pretrain_step_desk_32", |b| b.iter(|| pretrain_step(&mut state, &x, &y).unwrap()));
    group.finish();
}

criterion_group!(benches, conv, wavelet, generator);
criterion_main!(benches);
