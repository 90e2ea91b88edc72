//! Parallel ensemble execution with deterministic, index-ordered output.
//!
//! Work is split into chunks; each chunk runs on a dedicated rayon pool and
//! its results are handed to the sink in index order, so the output never
//! depends on the worker count or on scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sde::{Simulator, Trajectory};

/// Threads to use when `workers == 0`.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Computes `f(i)` for `i in 0..n` in parallel and feeds the results to
/// `sink` in increasing `i`. Stops at the first error (lowest failing index
/// within the first failing chunk).
pub fn run_indexed<T, F, S>(n: usize, workers: usize, f: F, mut sink: S) -> Result<()>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
    S: FnMut(usize, T) -> Result<()>,
{
    let workers = if workers == 0 {
        default_workers()
    } else {
        workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Configuration(format!("cannot start worker pool: {e}")))?;
    // bounded memory: at most one chunk of results alive at a time
    let chunk = (workers * 16).max(64);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let results: Vec<Result<T>> =
            pool.install(|| (start..end).into_par_iter().map(&f).collect());
        for (offset, r) in results.into_iter().enumerate() {
            sink(start + offset, r?)?;
        }
        start = end;
    }
    Ok(())
}

/// Runs trajectories `0..n_traj` of `sim`, streaming each to `sink`.
pub fn run_trajectories<S>(
    sim: &Simulator,
    n_traj: usize,
    workers: usize,
    mut sink: S,
) -> Result<()>
where
    S: FnMut(Trajectory) -> Result<()>,
{
    run_indexed(n_traj, workers, |i| sim.run(i), |_, t| sink(t))
}

/// Collects all trajectories in index order.
pub fn collect_trajectories(
    sim: &Simulator,
    n_traj: usize,
    workers: usize,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(n_traj);
    run_trajectories(sim, n_traj, workers, |t| {
        out.push(t);
        Ok(())
    })?;
    Ok(out)
}
