//! Sequential vs data-parallel batch runs over random scenarios.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use orch_core::harness::{check_invariants, random_scenarios, run_batch_sequential, ScenarioScript, ShapeBounds};
use orch_core::trace::Trace;

fn jobs(n: usize) -> Vec<(ScenarioScript, u64)> {
    random_scenarios(&ShapeBounds::default(), n, 7)
        .expect("default bounds are feasible")
        .into_iter()
        .zip(0..)
        .collect()
}

fn checked(_: &ScenarioScript, t: &Trace) -> usize {
    check_invariants(t).len()
}

fn batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch");
    group.sample_size(10);
    for n in [32, 128] {
        let jobs = jobs(n);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("sequential", n), &jobs, |b, jobs| {
            b.iter(|| run_batch_sequential(jobs, checked))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &jobs, |b, jobs| {
            b.iter(|| orch_core::harness::run_batch_parallel(jobs, checked))
        });
    }
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
