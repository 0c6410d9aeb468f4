//! Per-sample work distribution.
//!
//! Results always come back in index order and every reduction over them is
//! done sequentially by the caller, so outputs do not depend on the number
//! of worker threads.

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon's global pool. Without the `parallel` feature this runs
    /// sequentially.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Like [`map`](Self::map) but stops at the first error in index order.
    pub fn try_map<R, F>(self, n: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}

/// Sizes rayon's global pool. Only the first call in a process takes effect.
pub fn set_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    {
        // A second call fails because the pool already exists; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let f = |i: usize| (i as f64).sqrt();
        assert_eq!(Execution::Sequential.map(100, f), Execution::Parallel.map(100, f));
    }

    #[test]
    fn first_error_wins() {
        let r = Execution::Parallel.try_map(10, |i| if i >= 3 { Err(Error::EmptyClass(i)) } else { Ok(i) });
        assert!(matches!(r, Err(Error::EmptyClass(3))));
        assert!(set_threads(0).is_err());
    }
}
