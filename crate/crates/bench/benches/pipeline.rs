use criterion::{criterion_group, criterion_main, Criterion};
use pgseg_core::metrics::{hausdorff, ssim, SsimParams};
use pgseg_core::nn::{Conv2d, Tensor};
use pgseg_core::phantom::{generate_phantom, PhantomSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench_conv_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut conv = Conv2d::<f32>::new(16, 32, 3, 1, 1, &mut rng);
    let x = Tensor::<f32>::randn(&[1, 16, 64, 64], 1.0, &mut rng);
    c.bench_function("conv2d_forward_16x32_64px", |b| {
        b.iter(|| black_box(conv.forward(black_box(&x))))
    });
}

fn bench_ssim(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<f32> = (0..64 * 64).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let b_img: Vec<f32> = a.iter().map(|v| (v + 0.05).clamp(-1.0, 1.0)).collect();
    let params = SsimParams::default();
    c.bench_function("ssim_64px", |b| {
        b.iter(|| black_box(ssim(black_box(&a), black_box(&b_img), 64, 64, &params).unwrap()))
    });
}

fn bench_hausdorff(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<u8> = (0..64 * 64).map(|_| u8::from(rng.gen_bool(0.1))).collect();
    let b_img: Vec<u8> = (0..64 * 64).map(|_| u8::from(rng.gen_bool(0.1))).collect();
    c.bench_function("hausdorff_64px_10pct", |b| {
        b.iter(|| black_box(hausdorff(black_box(&a), black_box(&b_img), 64, 64).unwrap()))
    });
}

fn bench_phantom(c: &mut Criterion) {
    let spec = PhantomSpec::default_with_seed(4);
    c.bench_function("phantom_generate_32x128x128", |b| {
        b.iter(|| black_box(generate_phantom(black_box(&spec)).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_conv_forward,
    bench_ssim,
    bench_hausdorff,
    bench_phantom
);
criterion_main!(benches);
