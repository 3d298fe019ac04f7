//! Data-parallel fan-out with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Execution::Parallel`] runs on the
//! rayon pool; without it every mode runs sequentially. Results are always
//! returned in index order, so reductions are bit-reproducible regardless of
//! the mode or the worker count.

/// Environment variable holding the worker count for the global pool.
pub const WORKERS_ENV: &str = "LATTICE_GAS_WORKERS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Maps `f` over `0..n`, preserving order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
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

    /// Applies `f` to every item in place; results come back in item order.
    pub fn map_mut<T, U, F>(self, items: &mut [T], f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(usize, &mut T) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
            }
            _ => items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect(),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Sizes the global rayon pool from [`WORKERS_ENV`]. Returns the worker count in effect.
pub fn init_workers_from_env() -> usize {
    let requested = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = requested {
            // A second initialization is a no-op; the first one wins.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = requested;
        1
    }
}
