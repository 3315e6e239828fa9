//! Executor selection: serial for single-worker determinism, a rayon pool
//! otherwise. Results always come back in input order.

use lite_core::train::Executor;

pub enum WorkerPool {
    Serial,
    Rayon(rayon::ThreadPool),
}

impl WorkerPool {
    pub fn new(workers: usize) -> anyhow::Result<Self> {
        if workers <= 1 {
            Ok(WorkerPool::Serial)
        } else {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
            Ok(WorkerPool::Rayon(pool))
        }
    }
}

impl Executor for WorkerPool {
    fn run<I: Send, O: Send>(&self, items: Vec<I>, f: impl Fn(I) -> O + Sync + Send) -> Vec<O> {
        match self {
            WorkerPool::Serial => items.into_iter().map(f).collect(),
            WorkerPool::Rayon(pool) => {
                use rayon::prelude::*;
                pool.install(|| items.into_par_iter().map(f).collect())
            }
        }
    }
}
