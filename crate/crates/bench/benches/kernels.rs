use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dualprec_bench::{batch, snapshot, trainer, weights};
use dualprec_core::dual::Precision;
use dualprec_core::pack::{pack, switch_precision, unpack, Direction};
use dualprec_core::quant::{compute_scale, quantize_indices, truncate_indices, upscale_indices};
use dualprec_core::{QuantSpec, ScaleRule, UpscaleBits};

fn quantizer(c: &mut Criterion) {
    let w = weights(784 * 256, 1);
    let spec = QuantSpec::new(2, ScaleRule::LevelCount).unwrap();
    c.bench_function("quantize 784x256", |b| {
        b.iter(|| {
            let s = compute_scale(black_box(&w), spec).unwrap();
            quantize_indices(&w, s, spec).unwrap()
        })
    });
    let low = quantize_indices(&w, compute_scale(&w, spec).unwrap(), spec).unwrap();
    let bits = UpscaleBits::new((0..w.len()).map(|i| (i % 2) as u8).collect()).unwrap();
    c.bench_function("upscale + truncate 784x256", |b| {
        b.iter(|| truncate_indices(&upscale_indices(black_box(&low), &bits).unwrap()).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let model = snapshot();
    let (x, y) = batch(125, 2);
    c.bench_function("forward high, batch 125", |b| {
        b.iter(|| model.forward(black_box(&x), Precision::High).unwrap())
    });
    let mut t = trainer();
    c.bench_function("phase-1 step, batch 125", |b| {
        b.iter(|| t.step_phase1(black_box(&x), &y, true, 3e-5).unwrap())
    });
    let mut t = trainer();
    c.bench_function("phase-2 step, batch 125", |b| {
        b.iter(|| t.step_phase2(black_box(&x), &y, 4e-3).unwrap())
    });
}

fn format(c: &mut Criterion) {
    let model = snapshot();
    let bytes = pack(&model).unwrap();
    c.bench_function("pack", |b| b.iter(|| pack(black_box(&model)).unwrap()));
    c.bench_function("unpack", |b| b.iter(|| unpack(black_box(&bytes)).unwrap()));
    c.bench_function("switch down", |b| {
        b.iter(|| switch_precision(black_box(&bytes), Direction::Down, None).unwrap())
    });
}

criterion_group!(benches, quantizer, network, format);
criterion_main!(benches);
