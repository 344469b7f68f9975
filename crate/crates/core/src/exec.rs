//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in index order, and callers reduce them in
//! that order, so parallel and sequential runs are bit-identical. With the
//! `parallel` feature disabled rayon is not compiled in at all.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Toggles parallel execution at runtime. Has no effect without the
/// `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Caps the global worker pool. Reads `MAGC_THREADS` when `threads` is
/// `None`. Only the first call in a process takes effect.
pub fn init_threads(threads: Option<usize>) {
    let threads = threads.or_else(|| {
        std::env::var("MAGC_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
    });
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n > 1 && parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but over a slice.
pub fn map_slice<I, R, F>(items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Sync + Send,
{
    map_indexed(items.len(), |i| f(&items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let out = map_indexed(100, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_matches_parallel() {
        let work = |i: usize| (0..1000).map(|k| ((i * k) as f64).sin()).sum::<f64>();
        set_parallel(false);
        let a = map_indexed(32, work);
        set_parallel(true);
        let b = map_indexed(32, work);
        assert_eq!(a, b);
    }
}
