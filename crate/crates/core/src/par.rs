//! Order-preserving data-parallel helpers.
//!
//! With the `parallel` feature these fan out over rayon's pool; without it
//! they run as plain loops. Results always come back in index order, so
//! callers get identical output either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// True when the crate was built with the rayon backend.
pub const PARALLEL: bool = cfg!(feature = "parallel");

#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    items.par_iter_mut().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    items.iter_mut().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Sums `f(i)` for `i in 0..n` in chunks of `chunk`, adding the chunk totals
/// in index order so the result does not depend on scheduling.
pub fn sum_chunked<F>(n: usize, chunk: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let chunk = chunk.max(1);
    let chunks = n.div_ceil(chunk);
    map_range(chunks, |c| {
        let lo = c * chunk;
        let hi = (lo + chunk).min(n);
        (lo..hi).map(&f).sum::<f64>()
    })
    .into_iter()
    .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        assert_eq!(map_range(5, |i| i * i), vec![0, 1, 4, 9, 16]);
        let mut v = vec![1, 2, 3];
        let r = map_mut(&mut v, |i, x| {
            *x += 10;
            i
        });
        assert_eq!(v, vec![11, 12, 13]);
        assert_eq!(r, vec![0, 1, 2]);
    }

    #[test]
    fn chunked_sum_matches_serial() {
        let f = |i: usize| (i as f64).sqrt();
        let serial: f64 = {
            let mut acc = 0.0;
            for c in 0..(1000usize.div_ceil(64)) {
                acc += (c * 64..((c + 1) * 64).min(1000)).map(f).sum::<f64>();
            }
            acc
        };
        assert_eq!(sum_chunked(1000, 64, f).to_bits(), serial.to_bits());
    }
}
