//! Data-parallel helpers over batches.
//!
//! With the `parallel` feature (default) work is spread over the rayon
//! pool; without it every call runs sequentially. Results are always
//! returned in input order and callers reduce them sequentially, so the
//! numeric outcome does not depend on the thread count.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Maps `f` over consecutive chunks of `items`.
pub fn map_chunks<T, R, F>(exec: Exec, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(f).collect();
    }
    let _ = exec;
    items.chunks(chunk).map(f).collect()
}

/// Maps `f` over every item.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let xs: Vec<u32> = (0..103).collect();
        let seq = map_chunks(Exec::Sequential, &xs, 8, |c| c.iter().sum::<u32>());
        let par = map_chunks(Exec::Parallel, &xs, 8, |c| c.iter().sum::<u32>());
        assert_eq!(seq, par);
        assert_eq!(seq.len(), 13);
        let sq = map(Exec::Parallel, &xs, |x| x * x);
        assert_eq!(sq[10], 100);
    }
}
