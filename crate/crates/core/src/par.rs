//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the closures run on rayon's pool. Without it,
//! or when [`Execution::Sequential`] is requested, they run in index order.
//! Results are always gathered in index order, so the first error reported
//! is the one with the lowest index regardless of scheduling.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Applies `f` to every element, returning the lowest-index error if any.
pub fn try_for_each_mut<T, E, F>(items: &mut [T], exec: Execution, f: F) -> Result<(), E>
where
    T: Send,
    E: Send,
    F: Fn(usize, &mut T) -> Result<(), E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        let results: Vec<Result<(), E>> = items
            .par_iter_mut()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect();
        return results.into_iter().collect();
    }
    let _ = exec;
    items
        .iter_mut()
        .enumerate()
        .try_for_each(|(i, item)| f(i, item))
}

/// Evaluates `f(0..count)` and returns the outputs in index order.
pub fn map_range<R, F>(count: usize, exec: Execution, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..count).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..count).map(f).collect()
}
