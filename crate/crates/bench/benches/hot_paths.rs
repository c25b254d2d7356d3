use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use jepalab::autodiff::fft_time;
use jepalab::mask::{sample_mask, MaskConfig};
use jepalab::model::patchify;
use jepalab::objective::Variant;
use jepalab::probe::extract_pooled;
use jepalab_bench::{clips, random, state};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fft(c: &mut Criterion) {
    let x = random(&[16, 64], 3);
    c.bench_function("fft_time 16x64", |b| b.iter(|| fft_time(black_box(&x)).unwrap()));
}

fn masking(c: &mut Criterion) {
    let clip = &clips(1)[0];
    let grid = patchify(clip, 8, 2).unwrap().grid;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tube = MaskConfig::default();
    let guided = MaskConfig {
        motion_guided: true,
        ..MaskConfig::default()
    };
    c.bench_function("tube mask", |b| b.iter(|| sample_mask(&tube, clip, grid, 8, &mut rng).unwrap()));
    c.bench_function("motion-guided mask", |b| b.iter(|| sample_mask(&guided, clip, grid, 8, &mut rng).unwrap()));
}

fn encoding(c: &mut Criterion) {
    let s = state(Variant::Baseline);
    let clip = &clips(1)[0];
    c.bench_function("encode one clip", |b| b.iter(|| extract_pooled(&s.student, black_box(clip)).unwrap()));
}

fn training(c: &mut Criterion) {
    let batch: Vec<_> = clips(1).into_iter().take(2).collect();
    let mut group = c.benchmark_group("train_step batch 2");
    group.sample_size(10);
    for variant in [Variant::Baseline, Variant::KinL1, Variant::FwmHwLd] {
        let mut s = state(variant);
        group.bench_function(variant.label(), |b| b.iter(|| s.train_step(&batch, 1e-4).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, fft, masking, encoding, training);
criterion_main!(benches);
