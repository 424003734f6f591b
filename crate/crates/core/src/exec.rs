//! Data-parallel execution helpers.
//!
//! Kernels split their output into fixed-size disjoint chunks whose layout does
//! not depend on the number of worker threads, and every chunk is reduced in a
//! fixed sequential order. The rayon path and the sequential fallback therefore
//! produce bit-identical results.
//!
//! The rayon path is compiled in with the `parallel` feature (on by default) and
//! can be switched off at runtime with [`set_parallel`], which is how the bench
//! suite compares both.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Enables or disables the rayon path. Has no effect without the `parallel` feature.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Calls `f(chunk_index, chunk)` on consecutive `chunk_len`-sized chunks of `out`.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if out.is_empty() || chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] over two equally sized buffers chunked in lockstep.
pub fn for_each_chunk_pair_mut<F>(a: &mut [f64], b: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() || chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        a.par_chunks_mut(chunk_len)
            .zip(b.par_chunks_mut(chunk_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    a.chunks_mut(chunk_len)
        .zip(b.chunks_mut(chunk_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Evaluates `f(0..n)` into a vector, in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Elementwise map over a slice.
pub fn map_slice<F>(x: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    let mut out = vec![0.0; x.len()];
    for_each_chunk_mut(&mut out, ELEMENTWISE_CHUNK, |ci, chunk| {
        let base = ci * ELEMENTWISE_CHUNK;
        let end = base + chunk.len();
        for (o, &v) in chunk.iter_mut().zip(&x[base..end]) {
            *o = f(v);
        }
    });
    out
}

/// Chunk length for elementwise kernels.
pub const ELEMENTWISE_CHUNK: usize = 1 << 14;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything_in_order() {
        let mut v = vec![0usize; 1000];
        for_each_chunk_mut(&mut v, 64, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 64 + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
        assert_eq!(map_range(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
