use mome_core::exec::{Executor, Sequential};
use rayon::prelude::*;

/// Sequential or thread-pool evaluation of independent work items.
/// Results come back in index order either way.
pub enum LabExecutor {
    Sequential,
    Pool(rayon::ThreadPool),
}

impl LabExecutor {
    /// `deterministic` or one thread gives the sequential executor.
    pub fn new(threads: usize, deterministic: bool) -> Self {
        if deterministic || threads <= 1 {
            return LabExecutor::Sequential;
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => LabExecutor::Pool(pool),
            Err(_) => LabExecutor::Sequential,
        }
    }

    pub fn threads(&self) -> usize {
        match self {
            LabExecutor::Sequential => 1,
            LabExecutor::Pool(p) => p.current_num_threads(),
        }
    }
}

impl Executor for LabExecutor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            LabExecutor::Sequential => Sequential.map(n, f),
            LabExecutor::Pool(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        }
    }
}
