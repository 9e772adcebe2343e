use criterion::{criterion_group, criterion_main, Criterion};
use pedstress_bench::{cohort_panel, raw_session};
use pedstress_core::pipeline::{fit_model, stage_decompose, stage_detect, stage_smooth, PipelineConfig};
use std::hint::black_box;

fn signal(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    let raw = raw_session(1);
    let smooth = stage_smooth(&raw, &cfg).unwrap();
    let decomp = stage_decompose(&smooth, &cfg).unwrap();
    c.bench_function("smooth_and_downsample_60s", |b| b.iter(|| stage_smooth(black_box(&raw), &cfg).unwrap()));
    c.bench_function("decompose_60s", |b| b.iter(|| stage_decompose(black_box(&smooth), &cfg).unwrap()));
    c.bench_function("detect_60s", |b| b.iter(|| stage_detect(black_box(&decomp), &cfg)));
}

fn models(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    let panel = cohort_panel(20, 1);
    let mut group = c.benchmark_group("reml");
    group.sample_size(20);
    for name in ["segments", "avatar"] {
        let entry = cfg.models.iter().find(|m| m.spec.name == name).unwrap();
        group.bench_function(name, |b| b.iter(|| fit_model(black_box(&panel), entry)));
    }
    group.finish();
}

criterion_group!(benches, signal, models);
criterion_main!(benches);
