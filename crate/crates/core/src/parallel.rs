//! Execution-mode switch: rayon data-parallel loops with a sequential
//! fallback. Both paths are bit-identical because all stochastic work is
//! keyed by counter-based substreams rather than shared RNG state.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Default for Parallelism {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Parallelism::Rayon
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Parallelism::Sequential
    }
}

/// Map `0..n` to a vector, preserving index order.
pub fn map_indexed<T, F>(mode: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    match mode {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Fill `out[i] = f(i)` for all i. Parallel chunks write disjoint slots.
pub fn fill_indexed<T, F>(mode: Parallelism, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    match mode {
        Parallelism::Sequential => {
            for (i, slot) in out.iter_mut().enumerate() {
                *slot = f(i);
            }
        }
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            // Chunked to amortize scheduling overhead on short per-index work.
            let chunk = (out.len() / (4 * rayon::current_num_threads().max(1))).max(1024);
            out.par_chunks_mut(chunk).enumerate().for_each(|(ci, slots)| {
                let base = ci * chunk;
                for (off, slot) in slots.iter_mut().enumerate() {
                    *slot = f(base + off);
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_default_agree() {
        let a = map_indexed(Parallelism::Sequential, 1000, |i| i * i);
        let b = map_indexed(Parallelism::default(), 1000, |i| i * i);
        assert_eq!(a, b);

        let mut x = vec![0usize; 5000];
        let mut y = vec![0usize; 5000];
        fill_indexed(Parallelism::Sequential, &mut x, |i| i ^ 0xabc);
        fill_indexed(Parallelism::default(), &mut y, |i| i ^ 0xabc);
        assert_eq!(x, y);
    }
}
