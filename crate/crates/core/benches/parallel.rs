//! Sequential against rayon-parallel execution of the heavy loops: batch
//! construction (policy fits and the distance matrix) and seeded rollouts.
//! Build with `--no-default-features` to check that both arms collapse.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use situ_core::bench::synthetic_model;
use situ_core::config::LearnConfig;
use situ_core::par::ExecMode;
use situ_core::sim::{success_rate, teach, Scenario};
use situ_core::situ::Updater;

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn build(c: &mut Criterion) {
    let cfg = LearnConfig::default();
    let mut group = c.benchmark_group("synthetic_build");
    group.sample_size(10);
    for mode in MODES {
        group.bench_with_input(BenchmarkId::new(format!("{mode:?}"), 20), &mode, |b, &mode| {
            b.iter(|| synthetic_model(20, 2, 0.005, 0, &cfg, mode).unwrap())
        });
    }
    group.finish();
}

fn rollouts(c: &mut Criterion) {
    let s = Scenario::builtin("pour").unwrap();
    let (model, _) = teach(&Updater::new(LearnConfig::default()), &s, "base", 2, 0.005, 0).unwrap();
    let seeds: Vec<u64> = (0..64).collect();
    let mut group = c.benchmark_group("rollouts");
    group.sample_size(10);
    for mode in MODES {
        group.bench_with_input(BenchmarkId::new(format!("{mode:?}"), seeds.len()), &mode, |b, &mode| {
            b.iter(|| success_rate(&model, &s, "base", 0.5, &seeds, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, build, rollouts);
criterion_main!(benches);
