//! Execution seam: data-parallel map with a sequential fallback.
//!
//! Batch-shaped work in this crate (per-sample inference, dataset
//! shards, per-sequence infilling, metric reductions) funnels through
//! [`map`] / [`map_indexed`]. With the default `parallel` feature the
//! closure runs on the rayon pool; without it the same closure runs on a
//! plain iterator. Both paths produce elementwise-identical output — the
//! closures used here are pure — so the feature flag only changes wall
//! time, never results. `benches/parallel.rs` measures the difference.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every item, preserving order.
pub fn map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Applies `f` to every index in `0..n`, preserving order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// True when this build fans work out over rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
