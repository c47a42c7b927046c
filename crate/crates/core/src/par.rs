//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool.
//! Without it, or after [`set_sequential(true)`](set_sequential), everything
//! runs in order on the calling thread. Both paths produce bitwise-identical
//! results: work items never share accumulators and every reduction happens
//! afterwards in index order.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Minimum multiply-accumulate count before a matmul is split across threads.
pub(crate) const MATMUL_PAR_THRESHOLD: usize = 1 << 16;

/// Route all helpers through the sequential path (used by benches to compare).
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// True when helpers will actually fan out to worker threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// `(0..n).map(f).collect()`, fanned out when parallelism is on.
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

/// Apply `f(row_index, row)` to each `width`-sized chunk of `out`.
pub fn for_each_row<F>(out: &mut [f64], width: usize, parallel_hint: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_hint && is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = parallel_hint;
    out.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}
