use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taco_core::dataset::AUDIO_WINDOW;
use taco_core::encoders::audio_to_melspec;
use taco_core::par::{is_parallel, par_map, seq_map};
use taco_core::rollout::{episode_seed, record_expert_episode, EnvKind, EnvOptions, ObjectClass};

fn melspec_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let windows: Vec<Vec<f32>> = (0..16).map(|_| (0..AUDIO_WINDOW).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut g = c.benchmark_group("melspec_16_windows");
    g.sample_size(20);
    g.bench_function(BenchmarkId::new("seq", 16), |b| b.iter(|| seq_map(black_box(&windows), |_, w| audio_to_melspec(w).unwrap())));
    g.bench_function(BenchmarkId::new(if is_parallel() { "par" } else { "par_fallback" }, 16), |b| {
        b.iter(|| par_map(black_box(&windows), |_, w| audio_to_melspec(w).unwrap()))
    });
    g.finish();
}

fn expert_demos(c: &mut Criterion) {
    let idx: Vec<usize> = (0..4).collect();
    let record = |_: usize, &i: &usize| record_expert_episode(EnvKind::PickPlace, episode_seed(0, i), ObjectClass::alternating(i), &EnvOptions::default(), "b").unwrap();
    let mut g = c.benchmark_group("expert_demos_4");
    g.sample_size(10);
    g.bench_function("seq", |b| b.iter(|| seq_map(black_box(&idx), record)));
    g.bench_function(if is_parallel() { "par" } else { "par_fallback" }, |b| b.iter(|| par_map(black_box(&idx), record)));
    g.finish();
}

criterion_group!(benches, melspec_batch, expert_demos);
criterion_main!(benches);
