//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) items run on a rayon pool; without
//! it, or with [`Execution::sequential`], they run in order on the calling
//! thread. Results always come back in item order, so the choice never
//! changes outputs.

use std::fmt;
#[cfg(feature = "parallel")]
use std::sync::Arc;

#[derive(Clone, Default)]
pub struct Execution {
    sequential: bool,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl fmt::Debug for Execution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Execution")
            .field("workers", &self.workers())
            .finish()
    }
}

impl Execution {
    /// Runs everything on the calling thread.
    pub fn sequential() -> Self {
        Self {
            sequential: true,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// Uses the global rayon pool (all cores).
    pub fn parallel() -> Self {
        Self::default()
    }

    /// Caps parallelism at `workers` threads; `Some(1)` is sequential and
    /// `None` uses every core.
    pub fn with_workers(workers: Option<usize>) -> Self {
        match workers {
            Some(0) | Some(1) => Self::sequential(),
            None => Self::parallel(),
            #[cfg(feature = "parallel")]
            Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => Self {
                    sequential: false,
                    pool: Some(Arc::new(pool)),
                },
                Err(_) => Self::parallel(),
            },
            #[cfg(not(feature = "parallel"))]
            Some(_) => Self::sequential(),
        }
    }

    pub fn is_sequential(&self) -> bool {
        self.sequential || !cfg!(feature = "parallel")
    }

    /// Effective worker count.
    pub fn workers(&self) -> usize {
        if self.is_sequential() {
            return 1;
        }
        #[cfg(feature = "parallel")]
        {
            match &self.pool {
                Some(pool) => pool.current_num_threads(),
                None => rayon::current_num_threads(),
            }
        }
        #[cfg(not(feature = "parallel"))]
        1
    }

    /// `f(0), f(1), ..., f(n - 1)` in order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        if self.is_sequential() || n < 2 {
            return (0..n).map(f).collect();
        }
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            let run = || (0..n).into_par_iter().map(&f).collect();
            match &self.pool {
                Some(pool) => pool.install(run),
                None => run(),
            }
        }
        #[cfg(not(feature = "parallel"))]
        unreachable!()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let seq = Execution::sequential().map(100, |i| i * i);
        let par = Execution::with_workers(Some(3)).map(100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(Execution::parallel().map(0, |i| i), Vec::<usize>::new());
        assert_eq!(Execution::with_workers(Some(1)).workers(), 1);
    }
}
