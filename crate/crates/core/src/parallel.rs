//! Parallel-map capability handed to the modules by the caller that owns the
//! worker pool. Results always come back in input order, so output does not
//! depend on the number of workers.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Default)]
pub struct Workers {
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Workers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Workers({})", self.count())
    }
}

impl Workers {
    /// Runs everything on the calling thread.
    pub fn serial() -> Self {
        Self { pool: None }
    }

    pub fn new(count: usize) -> Result<Self> {
        if count <= 1 {
            return Ok(Self::serial());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(count)
            .build()
            .map_err(|e| Error::Input(format!("cannot start {count} workers: {e}")))?;
        Ok(Self { pool: Some(Arc::new(pool)) })
    }

    pub fn count(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    pub fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        match &self.pool {
            None => items.into_iter().map(f).collect(),
            Some(pool) => pool.install(|| items.into_par_iter().map(f).collect()),
        }
    }

    /// Like [`Workers::map`], failing with the first error in input order.
    pub fn try_map<T, R, F>(&self, items: Vec<T>, f: F) -> Result<Vec<R>>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> Result<R> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..200).collect();
        let serial = Workers::serial().map(items.clone(), |v| v * v);
        let pooled = Workers::new(4).unwrap().map(items, |v| v * v);
        assert_eq!(serial, pooled);
    }
}
