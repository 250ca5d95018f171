//! Execution-mode switch for the data-parallel inner loops.
//!
//! Calibration and evaluation iterate independently over sequences; with the
//! `parallel` feature they fan out over a rayon pool, otherwise they run
//! sequentially. Results are always reduced in corpus order, so a given mode
//! produces identical bytes regardless of thread count or scheduling.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Single-threaded, single-stream processing.
    Sequential,
    /// Rayon data parallelism over fixed-size chunks. Falls back to
    /// sequential when the crate is built without the `parallel` feature.
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Number of sequences each worker processes before its partial result is
/// merged. Fixed so that chunk boundaries (and therefore the floating-point
/// reduction tree) never depend on the machine.
pub const CHUNK_SIZE: usize = 8;

/// Map `f` over `items`, preserving order in the output.
pub fn map_ordered<T, U, F>(items: &[T], mode: ExecMode, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().map(f).collect()
            }
        }
    }
}

/// Map `f` over fixed-size chunks of `items`, preserving chunk order.
pub fn map_chunks_ordered<T, U, F>(items: &[T], mode: ExecMode, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> U + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.chunks(CHUNK_SIZE).map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                items.par_chunks(CHUNK_SIZE).map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.chunks(CHUNK_SIZE).map(f).collect()
            }
        }
    }
}
