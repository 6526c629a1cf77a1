//! Running many scenarios at once. Each run is independent and
//! deterministic, so the parallel and sequential paths yield equal results.

use crate::trace::Trace;

use super::run::run_scenario;
use super::scenario::{ScenarioError, ScenarioScript};

/// Runs every `(script, seed)` in order and maps each trace through `f`.
pub fn run_batch_sequential<T, F>(jobs: &[(ScenarioScript, u64)], f: F) -> Vec<Result<T, ScenarioError>>
where
    F: Fn(&ScenarioScript, &Trace) -> T,
{
    jobs.iter()
        .map(|(s, seed)| run_scenario(s, *seed).map(|t| f(s, &t)))
        .collect()
}

#[cfg(feature = "parallel")]
pub fn run_batch_parallel<T, F>(jobs: &[(ScenarioScript, u64)], f: F) -> Vec<Result<T, ScenarioError>>
where
    T: Send,
    F: Fn(&ScenarioScript, &Trace) -> T + Sync,
{
    use rayon::prelude::*;
    jobs.par_iter()
        .map(|(s, seed)| run_scenario(s, *seed).map(|t| f(s, &t)))
        .collect()
}

/// Parallel when built with the `parallel` feature, sequential otherwise.
/// Results are in input order either way.
pub fn run_batch<T, F>(jobs: &[(ScenarioScript, u64)], f: F) -> Vec<Result<T, ScenarioError>>
where
    T: Send,
    F: Fn(&ScenarioScript, &Trace) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        run_batch_parallel(jobs, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_batch_sequential(jobs, f)
    }
}
