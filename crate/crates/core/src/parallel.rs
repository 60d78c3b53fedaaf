//! Worker-pool handle passed into the solvers.
//!
//! Modules never spawn threads on their own; the caller (CLI or test) builds
//! one pool and hands it around. Results are written into per-item slots, so
//! outputs do not depend on the worker count.

use std::sync::Arc;

/// Shared worker pool.
#[derive(Clone)]
pub struct Workers {
    pool: Arc<rayon::ThreadPool>,
}

impl Workers {
    /// Pool with `n` threads (`n = 1` gives fully serial execution).
    pub fn new(n: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool");
        Workers { pool: Arc::new(pool) }
    }

    pub fn serial() -> Self {
        Self::new(1)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Map `f` over `0..n`, collecting results in index order.
    pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync>(&self, n: usize, f: F) -> Vec<T> {
        use rayon::prelude::*;
        self.pool.install(|| (0..n).into_par_iter().map(|i| f(i)).collect())
    }
}

impl Default for Workers {
    fn default() -> Self {
        Self::serial()
    }
}
