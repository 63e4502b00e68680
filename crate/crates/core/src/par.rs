//! Chunked data parallelism with a sequential fallback.
//!
//! Work is always split into the same fixed-size chunks and results come back
//! in chunk order, so reductions done by the caller are bitwise identical
//! whichever execution mode is used.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    /// Fan out over the rayon pool. Without the `parallel` feature this runs
    /// sequentially.
    #[default]
    Parallel,
    Sequential,
}

/// Number of collocation columns processed together.
pub const CHUNK: usize = 256;

pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    (0..n).step_by(chunk.max(1)).map(|s| s..(s + chunk).min(n)).collect()
}

/// Maps `f` over `0..count`, returning results in index order.
pub fn map_indexed<T, F>(count: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
        _ => (0..count).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range() {
        let r = chunk_ranges(10, 4);
        assert_eq!(r, vec![0..4, 4..8, 8..10]);
        assert!(chunk_ranges(0, 4).is_empty());
    }

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt();
        assert_eq!(
            map_indexed(1000, Execution::Parallel, f),
            map_indexed(1000, Execution::Sequential, f)
        );
    }
}
