//! Compares parallel and sequential execution of the sensitivity-bundle
//! sweep, the dominant cost of a reach run.
//!
//! The parallel path is exercised through the default rayon pool; the
//! sequential baseline forces a single worker. Building the crate with
//! `--no-default-features` removes rayon entirely and makes both paths
//! identical.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sts_reach::exec;
use sts_reach::grid::Grid;
use sts_reach::lqr::{self, ClosedLoop};
use sts_reach::planning;
use sts_reach::reach::{augmented_flow, latin_hypercube, state_bounds};
use sts_reach::scenario::Scenario;

fn bundle_sweep(c: &mut Criterion) {
    let scenario = Scenario::default();
    let grid = Grid::from_span(0.0, 3.5, 20.0).unwrap();
    let reference = planning::build_reference(
        &grid,
        &scenario.p_hat,
        &scenario.z_start(),
        &scenario.z_end(),
        &scenario.x0.fixed_rows::<3>(0).into_owned(),
        &scenario.allocation,
    )
    .unwrap();
    let schedules = lqr::linearize_schedule(&reference, &scenario.p_hat).unwrap();
    let riccati = lqr::solve_riccati(&schedules, &scenario.weights).unwrap();
    let gains = lqr::gain_schedule(&riccati, &schedules, &scenario.weights.r).unwrap();
    let closed_loop = ClosedLoop::new(&reference, &gains);
    let substeps = closed_loop.stability_substeps(&schedules);
    let samples = latin_hypercube(8, &scenario.param_box, scenario.seed_bounds);

    let sweep = |workers: usize| {
        exec::with_workers(workers, || {
            let bundles = exec::map_indexed(samples.len(), |i| {
                augmented_flow(&samples[i], &scenario.x0, &grid, &closed_loop, substeps).unwrap()
            });
            state_bounds(&bundles).unwrap().lo.len()
        })
    };

    let mut group = c.benchmark_group("bundle_sweep_8_samples");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("workers", 1), |b| b.iter(|| sweep(1)));
    #[cfg(feature = "parallel")]
    group.bench_function(BenchmarkId::new("workers", 0), |b| b.iter(|| sweep(0)));
    group.finish();
}

criterion_group!(benches, bundle_sweep);
criterion_main!(benches);
