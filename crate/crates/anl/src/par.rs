//! Data-parallel helpers with a sequential fallback.
//!
//! Reductions stay bitwise deterministic: work is mapped into an
//! index-ordered buffer (parallel or not) and folded sequentially, so both
//! build modes produce identical floats.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Build label for bench output and the run manifest.
pub const MODE: &str = if cfg!(feature = "parallel") {
    "parallel"
} else {
    "sequential"
};

/// Map `f` over `0..n`, preserving index order in the result.
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

/// Configure the global thread pool. A no-op in sequential builds; returns
/// whether the request took effect.
pub fn configure_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        false
    }
}
