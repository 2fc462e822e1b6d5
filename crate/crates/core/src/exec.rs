//! Pluggable evaluation of independent work items.

use alloc::vec::Vec;

/// Maps `f` over `0..n`, returning results in index order.
///
/// Implementations may run items concurrently; callers reduce the results
/// in index order, so the outcome does not depend on the executor.
pub trait Executor: Sync {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs items one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}
