//! Execution strategy for the data-parallel loops (orbit ensembles, per-cell
//! kernel rows, per-class solves).
//!
//! Work items are indexed and every item derives its randomness from its own
//! index, so the sequential and parallel strategies return bit-identical
//! results. Reductions only ever sum integers or collect in index order.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How indexed work items are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    /// Plain iterator loop on the calling thread.
    Sequential,
    /// Rayon work stealing. Falls back to [`Exec::Sequential`] when the
    /// `parallel` feature is disabled.
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Maps every index of `range` through `f`, collecting in index order.
    pub fn map<T, F>(self, range: Range<usize>, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return range.into_par_iter().map(f).collect();
        }
        range.map(f).collect()
    }

    /// Accumulates integer histograms over `range`. `f(i, acc)` adds the
    /// contribution of item `i` into `acc`; partial histograms are merged by
    /// element-wise addition, so the result does not depend on scheduling.
    pub fn sum_counts<F>(self, range: Range<u64>, bins: usize, f: F) -> Vec<u64>
    where
        F: Fn(u64, &mut [u64]) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return range
                .into_par_iter()
                .fold(
                    || vec![0u64; bins],
                    |mut acc, i| {
                        f(i, &mut acc);
                        acc
                    },
                )
                .reduce(|| vec![0u64; bins], add_counts);
        }
        let mut acc = vec![0u64; bins];
        for i in range {
            f(i, &mut acc);
        }
        acc
    }
}

#[cfg(feature = "parallel")]
fn add_counts(mut a: Vec<u64>, b: Vec<u64>) -> Vec<u64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree() {
        let f = |i: usize| (i * i) % 7;
        assert_eq!(Exec::Sequential.map(0..100, f), Exec::Parallel.map(0..100, f));
        let g = |i: u64, acc: &mut [u64]| acc[(i % 5) as usize] += i;
        assert_eq!(
            Exec::Sequential.sum_counts(0..1000, 5, g),
            Exec::Parallel.sum_counts(0..1000, 5, g)
        );
    }
}
