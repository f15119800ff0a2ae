use std::hint::black_box;
use std::time::Duration;

use adaptive_derms::par::Execution;
use adaptive_derms::sim::{builtin, builtin_scenarios, run_batch, run_with, Mode, RunOptions};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch(c: &mut Criterion) {
    let scenarios = builtin_scenarios();
    let mut group = c.benchmark_group("catalog_batch");
    group.sample_size(10).measurement_time(Duration::from_secs(20));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(run_batch(&scenarios, exec)))
        });
    }
    group.finish();
}

fn within_tick(c: &mut Criterion) {
    let mut sc = builtin("pv-fluct", Mode::Adaptive).unwrap();
    sc.horizon_s = 600.0;
    let mut group = c.benchmark_group("within_tick");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(run_with(&sc, RunOptions { within_tick: Some(exec) }).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, batch, within_tick);
criterion_main!(benches);
