//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) items are distributed over a rayon
//! pool; without it the same code runs sequentially. Results are always
//! returned in item order, so downstream folds are deterministic regardless
//! of worker count or scheduling.

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    (0..n).map(f).collect()
}

/// Runs `job` on a pool of `workers` threads (0 = one per core). Without the
/// `parallel` feature the worker count is ignored and `job` runs inline.
#[cfg(feature = "parallel")]
pub fn with_workers<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("failed to build worker pool");
    pool.install(job)
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<T: Send>(_workers: usize, job: impl FnOnce() -> T + Send) -> T {
    job()
}
