//! Worker-thread control.
//!
//! Kernels parallelize over independent output rows/channels, so results are
//! bit-identical for any worker count; the pool size only affects speed.

/// Runs `f` inside a rayon pool of `threads` workers. `threads == 0` uses
/// the ambient (default) pool.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build worker pool");
    pool.install(f)
}
