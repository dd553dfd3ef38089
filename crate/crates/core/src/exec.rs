//! Sequential / data-parallel execution switch for the numeric kernels.
//!
//! Every kernel writes disjoint output chunks and sums each element in a
//! fixed order, so both modes produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How kernels distribute independent output chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Falls back to sequential when the `parallel` feature is off.
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

// Below this many output elements rayon's scheduling overhead dominates.
#[cfg(feature = "parallel")]
const PARALLEL_MIN_ELEMS: usize = 4096;

/// Calls `f(chunk_index, chunk)` for every `chunk`-sized piece of `out`.
pub(crate) fn for_each_chunk<F>(exec: Exec, out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel && out.len() >= PARALLEL_MIN_ELEMS && out.len() > chunk {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Order-preserving map over a slice.
pub fn map_ordered<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}
