//! Order-preserving parallel map bounded by a backend's concurrency limit.

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

pub struct Fanout {
    pool: Option<ThreadPool>,
    width: usize,
}

impl Fanout {
    /// A fan-out of at most `max_concurrency` workers. Widths at or above the
    /// global rayon pool size reuse the global pool.
    pub fn new(max_concurrency: usize) -> Self {
        let width = max_concurrency.max(1);
        let pool = if width > 1 && width < rayon::current_num_threads() {
            ThreadPoolBuilder::new().num_threads(width).build().ok()
        } else {
            None
        };
        Self { pool, width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Map `f` over `items`; output order always equals input order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        if self.width <= 1 || items.len() <= 1 {
            return items.iter().map(f).collect();
        }
        match &self.pool {
            Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            None => items.par_iter().map(&f).collect(),
        }
    }

    /// Like [`Fanout::map`] but stops at the first error (in input order).
    pub fn try_map<T, R, E, F>(&self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}
