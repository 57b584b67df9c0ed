use dualfilter_core::Executor;
use rayon::prelude::*;

use crate::error::{CliError, Result};

/// Work-stealing pool; results come back in index order, so every
/// reduction is the same as with [`dualfilter_core::Sequential`].
pub struct RayonExecutor {
    pool: rayon::ThreadPool,
}

impl RayonExecutor {
    /// `threads = 0` uses the machine parallelism.
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
        Ok(RayonExecutor { pool })
    }
}

impl Executor for RayonExecutor {
    fn map_indexed<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }

    fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualfilter_core::Sequential;

    #[test]
    fn results_keep_index_order() {
        let pool = RayonExecutor::new(3).unwrap();
        assert_eq!(pool.threads(), 3);
        let f = |i: usize| (i as f64).sqrt().sin();
        assert_eq!(pool.map_indexed(1000, f), Sequential.map_indexed(1000, f));
    }
}
