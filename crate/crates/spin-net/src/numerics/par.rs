//! Runtime switch for data-parallel kernels.
//!
//! Parallelism is over independent output rows only; every per-row reduction
//! runs in a fixed order, so parallel and sequential execution produce
//! bit-identical results. Built without the `parallel` feature the crate
//! falls back to the sequential path unconditionally.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

pub fn set_parallel(on: bool) {
    PARALLEL.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Apply `f` to each consecutive `row_len` chunk of `out`, indexed by row.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    for (i, chunk) in out.chunks_mut(row_len).enumerate() {
        f(i, chunk);
    }
}
