//! Order-stable data parallelism.
//!
//! Work is cut into fixed-size contiguous chunks whose size does not depend
//! on the thread count. Each chunk is folded sequentially and the per-chunk
//! results come back in chunk order, so a caller that reduces them in order
//! gets bit-identical results under both execution modes.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Samples per chunk.
pub const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when built with the `parallel` feature, otherwise
    /// runs sequentially.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Folds each chunk of `items` into a fresh accumulator and returns the
/// accumulators in chunk order.
pub fn fold_chunks<T, A, I, F>(items: &[T], exec: Execution, init: I, fold: F) -> Result<Vec<A>>
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, &T) -> Result<()> + Sync,
{
    let run = |chunk: &[T]| -> Result<A> {
        let mut acc = init();
        for item in chunk {
            fold(&mut acc, item)?;
        }
        Ok(acc)
    };
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_chunks(CHUNK).map(run).collect();
    }
    let _ = exec;
    items.chunks(CHUNK).map(run).collect()
}

/// Maps every item, preserving order.
pub fn map_items<T, U, F>(items: &[T], exec: Execution, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}
