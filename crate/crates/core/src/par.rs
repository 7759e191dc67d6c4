//! Seed-level data parallelism.
//!
//! Every sweep in the crate (verification seeds, ablation arms, Monte Carlo
//! batches) goes through [`map_indexed`]. Each work item owns its RNG stream, so
//! the parallel and sequential paths return identical results in identical
//! order. Without the `parallel` feature everything runs on the calling thread.

/// Applies `f` to every item, in parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    map_indexed_sequential(items, f)
}

/// Sequential reference path; always available so benchmarks can compare.
pub fn map_indexed_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Caps the global worker pool. Returns false when the pool was already built
/// or parallelism is compiled out.
pub fn init_thread_pool(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
