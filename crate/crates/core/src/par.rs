//! Order-preserving map over independent work items (chains, replicates).
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it, or when `parallel` is `false`, items run in index order on the
//! calling thread. Results come back in index order either way, so callers
//! that seed each item independently get identical output in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::seed::derive_seed;
use crate::{Error, Result};

pub fn map_indexed<T, F>(count: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..count).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..count).map(f).collect()
}

/// Runs `chains` independent chains, chain `c` seeded with
/// `derive_seed(master, &[c])`. Fails with the first error in chain order.
pub fn run_chains<T, F>(chains: usize, master: u64, parallel: bool, fit: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    if chains == 0 {
        return Err(Error::Config("at least one chain is required".into()));
    }
    map_indexed(chains, parallel, |c| fit(derive_seed(master, &[c as u64])))
        .into_iter()
        .collect()
}

/// Whether `map_indexed(.., true, ..)` actually runs on a thread pool.
pub const fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}
