use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dcp_core::latentdir::DirectionSet;
use dcp_core::rng;
use dcp_core::scorer::{accumulate_scores, perturb_gradients, ScoringConfig};
use dcp_core::synthnet::{init_generator, synthesize_batch, ForwardOptions, GeneratorConfig};
use dcp_core::DirectionMode;

fn synthesis(c: &mut Criterion) {
    let cfg = GeneratorConfig::default();
    let gen = init_generator(&cfg, 0).unwrap();
    let w = rng::normal_tensor(&[8, cfg.w_dim], &mut rng::stream(0, 0));
    c.bench_function("synthesize_batch_8", |b| {
        b.iter(|| black_box(synthesize_batch(&gen, &w, &ForwardOptions::default()).unwrap()))
    });
}

fn scoring(c: &mut Criterion) {
    let cfg = GeneratorConfig::default();
    let gen = init_generator(&cfg, 0).unwrap();
    let mut r = rng::stream(0, 1);
    let w = rng::normal_vec(cfg.w_dim, &mut r);
    let d = rng::normal_vec(cfg.w_dim, &mut r);
    c.bench_function("perturb_gradients", |b| {
        b.iter(|| black_box(perturb_gradients(&gen, &w, &d, 5.0).unwrap()))
    });
    let ds = DirectionSet::random(vec![0.0; cfg.w_dim]);
    let scfg = ScoringConfig {
        n_latents: 4,
        n_directions: 4,
        direction_mode: DirectionMode::Random,
        ..Default::default()
    };
    let mut group = c.benchmark_group("accumulate_scores_4x4");
    group.sample_size(10);
    group.bench_function("serial", |b| b.iter(|| black_box(accumulate_scores(&gen, &ds, &scfg, 1).unwrap())));
    group.finish();
}

criterion_group!(benches, synthesis, scoring);
criterion_main!(benches);
