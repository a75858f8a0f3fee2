//! Data-parallel helpers with a sequential fallback.
//!
//! Work splits into fixed-size chunks; per-chunk results merge in chunk
//! order, so the `parallel` feature changes wall time but never the
//! numbers: both paths fold in exactly the same order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk size for batch-level work. Fixed (not derived from the thread
/// count) so accumulation order is stable across machines.
pub const CHUNK: usize = 64;

/// Map over items, preserving order.
pub fn map_indexed<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Sequential twin of [`map_indexed`]; exists so benchmarks can compare
/// both paths in one binary.
pub fn map_indexed_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Fold each fixed-size chunk independently and return the per-chunk
/// accumulators in chunk order. The index passed to `fold` is global.
pub fn fold_chunks<T, A, I, F>(items: &[T], chunk: usize, init: I, fold: F) -> Vec<A>
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(A, usize, &T) -> A + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items
            .par_chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                part.iter()
                    .enumerate()
                    .fold(init(), |acc, (i, t)| fold(acc, ci * chunk + i, t))
            })
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                part.iter()
                    .enumerate()
                    .fold(init(), |acc, (i, t)| fold(acc, ci * chunk + i, t))
            })
            .collect()
    }
}

/// Sequential twin of [`fold_chunks`], chunked identically.
pub fn fold_chunks_seq<T, A, I, F>(items: &[T], chunk: usize, init: I, fold: F) -> Vec<A>
where
    I: Fn() -> A,
    F: Fn(A, usize, &T) -> A,
{
    items
        .chunks(chunk)
        .enumerate()
        .map(|(ci, part)| {
            part.iter()
                .enumerate()
                .fold(init(), |acc, (i, t)| fold(acc, ci * chunk + i, t))
        })
        .collect()
}
