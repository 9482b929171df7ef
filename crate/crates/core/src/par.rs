//! Data-parallel helpers.
//!
//! With the `parallel` feature the maps below fan out over the rayon pool;
//! without it they run sequentially. Both paths visit the same items and
//! collect results in index order, so outputs are bit-identical regardless
//! of the thread count. Reductions are always performed by the caller on the
//! collected vector, never inside the pool.

/// Rows per work item for chunked batch evaluation. Fixed so that the chunk
/// boundaries (and therefore every floating-point result) do not depend on
/// the number of worker threads.
pub const CHUNK_ROWS: usize = 64;

#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_range_seq(n, f)
}

pub fn map_range_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Half-open row ranges of at most [`CHUNK_ROWS`] rows covering `0..n`.
pub fn row_chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(CHUNK_ROWS)
        .map(|start| start..(start + CHUNK_ROWS).min(n))
        .collect()
}

/// Number of worker threads the parallel sections will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Configure the global pool from `MACFLOW_THREADS` (falls back to rayon's
/// own `RAYON_NUM_THREADS` handling). Safe to call more than once.
pub fn init_threads_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("MACFLOW_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
