use rayon::prelude::*;
use rflow_core::Executor;

/// Name of the only environment variable the lab reads.
pub const THREADS_VAR: &str = "RF_THREADS";

/// Work-stealing executor on a private rayon pool.
pub struct Pool {
    pool: rayon::ThreadPool,
}

impl Pool {
    pub fn new(threads: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("failed to start worker pool");
        Self { pool }
    }

    /// Pool sized by `RF_THREADS`, defaulting to the available parallelism.
    pub fn from_env() -> Self {
        let n = std::env::var(THREADS_VAR)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Self::new(n)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Pool {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        if self.threads() == 1 {
            return (0..n).map(f).collect();
        }
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}
