//! Execution policy for the data-parallel kernels.
//!
//! Every parallel kernel collects per-index results into a `Vec` in index
//! order, so reductions done afterwards are independent of the thread count.
//! Without the `parallel` feature, [`Exec::Parallel`] runs sequentially.

/// How independent per-item work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Send + Sync,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => (0..n).map(f).collect(),
        }
    }

    /// Fills consecutive `chunk`-sized rows of `out` with `f(row_index, row)`.
    pub fn for_each_row<F>(self, out: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Send + Sync,
    {
        if chunk == 0 {
            return;
        }
        match self {
            Exec::Sequential => out.chunks_mut(chunk).enumerate().for_each(|(i, r)| f(i, r)),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                out.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, r)| f(i, r))
            }
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => out.chunks_mut(chunk).enumerate().for_each(|(i, r)| f(i, r)),
        }
    }
}
