//! Order-fixed parallel reductions.
//!
//! Floating-point sums depend on evaluation order, so every reduction that
//! feeds a loss value or a gradient goes through [`map_collect_chunks`]:
//! items are split into fixed-size chunks, each chunk is mapped (possibly on
//! another thread) and the per-chunk results are collected in chunk order.
//! The caller folds that vector sequentially, which makes the result
//! independent of thread count and scheduling. With `deterministic = false`
//! callers may instead use rayon's free-order reductions directly.

use rayon::prelude::*;

/// Map fixed chunks of `items` in parallel, returning per-chunk results in
/// chunk order.
pub fn map_collect_chunks<T, R, F>(items: &[T], chunk_size: usize, map: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync,
{
    let chunk_size = chunk_size.max(1);
    items
        .par_chunks(chunk_size)
        .enumerate()
        .map(|(i, c)| map(i, c))
        .collect()
}

/// Sum per-chunk scalar results sequentially (order-fixed).
pub fn sum_ordered(parts: &[f64]) -> f64 {
    parts.iter().sum()
}

/// Accumulate per-chunk gradient buffers sequentially into `out`.
pub fn accumulate_ordered(out: &mut [f64], parts: &[Vec<f64>]) {
    for part in parts {
        debug_assert_eq!(part.len(), out.len());
        for (o, p) in out.iter_mut().zip(part.iter()) {
            *o += *p;
        }
    }
}
