//! Chunked pixel loops, parallel over rayon when the `parallel` feature is
//! enabled and plain iterators otherwise. Both paths visit chunks in the same
//! disjoint order-independent partition, so results are identical bit for bit.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Caps worker parallelism for the data-parallel kernels.
///
/// Installs a global rayon pool of `threads` workers; calls after the pool is
/// already initialized are ignored. A no-op without the `parallel` feature.
pub fn set_thread_cap(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Runs `f(chunk_index, chunk)` over disjoint mutable chunks of `data`.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Runs `f(chunk_index, a_chunk, b_elem)` zipping chunks of `a` with elements
/// of `b`. Requires `a.len().div_ceil(chunk) == b.len()`.
pub(crate) fn for_each_chunk_zip_mut<A, B, F>(a: &mut [A], chunk: usize, b: &mut [B], f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut B) + Sync + Send,
{
    debug_assert_eq!(a.len().div_ceil(chunk), b.len());
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(chunk)
        .zip(b.par_iter_mut())
        .enumerate()
        .for_each(|(i, (ca, cb))| f(i, ca, cb));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(chunk)
        .zip(b.iter_mut())
        .enumerate()
        .for_each(|(i, (ca, cb))| f(i, ca, cb));
}

/// Maps `f(chunk_index, chunk)` over disjoint chunks of `data`, preserving
/// chunk order. Callers fold the result sequentially so that reductions do
/// not depend on rayon's split points.
pub(crate) fn map_chunks<T, R, F>(data: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return data.par_chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect();
    #[cfg(not(feature = "parallel"))]
    data.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
}
