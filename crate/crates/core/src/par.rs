//! Data-parallel helpers with a sequential fallback.
//!
//! Work is split into fixed-size chunks whose boundaries do not depend on the
//! number of threads, and partial results are always combined in chunk order.
//! That keeps every floating-point reduction bit-identical between the
//! parallel and sequential builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of calibration samples folded into one partial accumulator.
pub const SAMPLE_CHUNK: usize = 8;

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Runs `f` on each [`SAMPLE_CHUNK`]-sized chunk of `items` and returns the
/// per-chunk results in order.
pub fn map_chunks<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunks: Vec<&[T]> = items.chunks(SAMPLE_CHUNK).collect();
    map(&chunks, |c| f(c))
}

/// Like [`map_chunks`], but short-circuits on the first error in chunk order.
pub fn try_map_chunks<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&[T]) -> Result<R, E> + Sync + Send,
{
    map_chunks(items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v: Vec<usize> = (0..100).collect();
        assert_eq!(map(&v, |x| x * 2), (0..100).map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn chunk_boundaries_are_fixed() {
        let v: Vec<usize> = (0..19).collect();
        let lens = map_chunks(&v, |c| c.len());
        assert_eq!(lens, vec![8, 8, 3]);
    }
}
