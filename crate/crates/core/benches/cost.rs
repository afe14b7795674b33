//! Parallel vs sequential throughput of the hot loops.
//!
//! Each workload runs twice: on the default rayon pool and inside a
//! one-thread pool, which reproduces the sequential schedule without
//! rebuilding. Building with `--no-default-features` removes rayon from the
//! library entirely; both variants then measure the sequential fallback.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use koopman_eig::optimizer::{CostConfig, IdentificationProblem};
use koopman_eig::spectral::EigenvalueSet;
use koopman_eig::systems::{simulate_ensemble, DynSystem, SimGrid};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let n = rayon::current_num_threads();
    let mut v = vec![(
        "sequential".to_string(),
        rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap(),
    )];
    if cfg!(feature = "parallel") {
        v.push((format!("parallel_{n}"), rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()));
    }
    v
}

fn bench_simulation(c: &mut Criterion) {
    let sys = DynSystem::closure_default();
    let grid = SimGrid::square(-1.0, 1.0, 41).unwrap();
    let mut group = c.benchmark_group("simulate_ensemble_41x41");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| pool.install(|| simulate_ensemble(&sys, &grid, 0.2, 250, &[-1.0, -1.0], None).unwrap()))
        });
    }
    group.finish();
}

fn bench_cost(c: &mut Criterion) {
    let sys = DynSystem::closure_default();
    let grid = SimGrid::square(-1.0, 1.0, 21).unwrap();
    let ens = simulate_ensemble(&sys, &grid, 0.2, 250, &[-1.0, -1.0], None).unwrap();
    let problem = IdentificationProblem::new(Some(&sys), ens, CostConfig::new(SimGrid::square(-1.0, 1.0, 100).unwrap()))
        .unwrap();
    let eigs = EigenvalueSet::from_tuples(&[(-0.1, 0.0), (-1.0, 0.0), (-0.2, 0.0), (-0.3, 0.5)]);
    let mut group = c.benchmark_group("joint_cost_21x21");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| pool.install(|| problem.total_cost(black_box(&eigs)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_simulation, bench_cost);
criterion_main!(benches);
