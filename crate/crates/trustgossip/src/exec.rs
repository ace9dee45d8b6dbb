//! Thread-pool executor.

use rayon::prelude::*;
use trustgossip_core::exec::Executor;

/// Fans work out over the global rayon pool; results keep index order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Parallel;

impl Executor for Parallel {
    fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }

    fn map_mut<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(usize, &mut T) -> R + Sync + Send,
    {
        items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}
