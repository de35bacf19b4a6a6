//! Execution strategy for data-parallel inner loops.
//!
//! With the `parallel` feature (default) the helpers below fan work out over
//! rayon; without it they run plain sequential loops. Every parallel loop is
//! structured so each work item writes a disjoint region (or is collected in
//! index order) and performs its own reductions in a fixed order, so results
//! are bit-identical to the sequential path regardless of thread count.
//!
//! [`force_sequential`] flips the parallel build into the sequential code
//! path at runtime. Benchmarks and the parity tests use it to compare both
//! paths inside one binary.

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential code path at runtime (parallel builds only).
/// Safe to flip at any time: both paths compute bit-identical results.
pub fn force_sequential(flag: bool) {
    #[cfg(feature = "parallel")]
    FORCE_SEQUENTIAL.store(flag, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = flag;
}

/// True when work will actually be fanned out over rayon.
pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// `(0..n).map(f)` collected in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk_len` slices of `buf`.
/// Chunks are disjoint, so the parallel path is race-free by construction.
pub fn for_each_chunk<F>(buf: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(chunk_len > 0 && buf.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        buf.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in buf.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn chunks_cover_buffer() {
        let mut buf = vec![0.0; 12];
        for_each_chunk(&mut buf, 3, |i, c| c.fill(i as f64));
        assert_eq!(buf[0], 0.0);
        assert_eq!(buf[11], 3.0);
    }

    #[test]
    fn sequential_override_matches() {
        let a = map_range(64, |i| (i as f64).sin());
        force_sequential(true);
        let b = map_range(64, |i| (i as f64).sin());
        force_sequential(false);
        assert_eq!(a, b);
    }
}
