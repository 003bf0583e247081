//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch onto the rayon pool when
//! asked to; without it every call runs on the current thread. Callers pick
//! the mode at runtime so both paths can be benchmarked from one build.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_range<T, F>(n: usize, mode: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Elementwise kernel over a mutable slice, split into chunks above a size threshold.
pub(crate) fn for_each_chunk<F>(data: &mut [f64], f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    const CHUNK: usize = 1 << 15;
    #[cfg(feature = "parallel")]
    if data.len() > CHUNK {
        use rayon::prelude::*;
        data.par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(i, chunk)| f(i * CHUNK, chunk));
        return;
    }
    f(0, data);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let a = map_range(100, Parallelism::Parallel, |i| i * i);
        let b = map_range(100, Parallelism::Sequential, |i| i * i);
        assert_eq!(a, b);
    }

    #[test]
    fn chunks_cover_everything_once() {
        let mut v = vec![0.0; 100_000];
        for_each_chunk(&mut v, |offset, chunk| {
            for (i, x) in chunk.iter_mut().enumerate() {
                *x += (offset + i) as f64;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| x == i as f64));
    }
}
