use alloc::vec::Vec;

/// Maps a function over item indices. Implementations may run items on any
/// number of workers but must return results in index order, so reductions
/// done by the caller stay independent of the worker count.
pub trait Executor: Sync {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send;
}

/// Runs every item on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}
