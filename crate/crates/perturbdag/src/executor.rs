//! Thread-pool executor for the core crate's parallel loops.

use perturbdag_core::exec::Executor;
use rayon::prelude::*;

/// Environment variable holding the default thread budget.
pub const THREADS_ENV: &str = "PERTURBDAG_THREADS";

/// Runs tasks on a dedicated rayon pool. Results come back in index order,
/// so output never depends on the number of threads.
pub struct RayonExecutor {
    pool: rayon::ThreadPool,
}

impl RayonExecutor {
    /// `threads = 0` picks rayon's default (one per core).
    pub fn new(threads: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        Ok(Self { pool: rayon::ThreadPoolBuilder::new().num_threads(threads).build()? })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for RayonExecutor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}
