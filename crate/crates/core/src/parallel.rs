//! Deterministic data-parallel accumulation.
//!
//! Work is cut into fixed-size chunks whose boundaries do not depend on the
//! thread count. Chunks are mapped in parallel and folded strictly in chunk
//! order, so results are bit-identical for any number of worker threads.

use std::ops::Range;

use rayon::prelude::*;

pub const DEFAULT_CHUNK: usize = 256;

pub fn ordered_chunks<S, M, F>(n: usize, chunk: usize, map: M, mut fold: F)
where
    S: Send,
    M: Fn(Range<usize>) -> S + Sync,
    F: FnMut(S),
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let wave = (rayon::current_num_threads() * 4).max(1);
    let mut start = 0;
    while start < n_chunks {
        let end = (start + wave).min(n_chunks);
        let parts: Vec<S> = (start..end)
            .into_par_iter()
            .map(|c| map(c * chunk..((c + 1) * chunk).min(n)))
            .collect();
        for p in parts {
            fold(p);
        }
        start = end;
    }
}

/// Parallel map over `0..n` preserving order.
pub fn par_map<T, M>(n: usize, map: M) -> Vec<T>
where
    T: Send,
    M: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(map).collect()
}
