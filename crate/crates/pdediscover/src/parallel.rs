//! Deterministic data-parallel helpers.
//!
//! All hot loops in the crate reduce per-chunk partial results in a fixed
//! chunk order, so the floating-point result is identical whether the chunks
//! are evaluated by rayon or sequentially. The `parallel` feature (default)
//! compiles the rayon path; [`set_enabled`] switches between the two at
//! runtime, which is what the benchmarks use to compare them.

use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Enable or disable rayon execution at runtime. With the `parallel` feature
/// disabled this is a no-op; results are identical either way.
pub fn set_enabled(enabled: bool) {
    PARALLEL_ENABLED.store(enabled, Ordering::Relaxed);
}

pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL_ENABLED.load(Ordering::Relaxed)
}

/// Fixed chunk length used for reductions. Constant so that the partial-sum
/// tree does not depend on thread count.
pub const CHUNK: usize = 2048;

fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    let mut out = Vec::with_capacity(n.div_ceil(chunk.max(1)));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        out.push(start..end);
        start = end;
    }
    out
}

/// Map fixed-size chunks of `0..n` to partial values, in chunk order.
pub fn chunk_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = chunk_ranges(n, CHUNK);
    #[cfg(feature = "parallel")]
    if is_enabled() {
        return ranges.into_par_iter().map(f).collect();
    }
    ranges.into_iter().map(f).collect()
}

/// Chunked dot product with a deterministic reduction order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    chunk_map(a.len(), |r| {
        let mut acc = 0.0;
        for i in r {
            acc += a[i] * b[i];
        }
        acc
    })
    .into_iter()
    .sum()
}

/// Chunked sum of `f(i)` over `0..n`, reduced in chunk order.
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    chunk_map(n, |r| {
        let mut acc = 0.0;
        for i in r {
            acc += f(i);
        }
        acc
    })
    .into_iter()
    .sum()
}

/// Chunked vector accumulation: partials of length `len` produced per chunk
/// of `0..n`, summed entry-wise in chunk order.
pub fn accumulate_vec<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync + Send,
{
    let partials = chunk_map(n, |r| {
        let mut buf = vec![0.0; len];
        f(r, &mut buf);
        buf
    });
    let mut out = vec![0.0; len];
    for p in partials {
        for (o, v) in out.iter_mut().zip(&p) {
            *o += v;
        }
    }
    out
}

/// Fill disjoint `CHUNK`-sized slices of an output buffer in parallel. The
/// writer receives the chunk range and the matching mutable slice.
pub fn fill_chunks<F>(out: &mut [f64], f: F)
where
    F: Fn(Range<usize>, &mut [f64]) + Sync + Send,
{
    let n = out.len();
    #[cfg(feature = "parallel")]
    if is_enabled() {
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, slice)| {
            let start = ci * CHUNK;
            f(start..start + slice.len(), slice);
        });
        return;
    }
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        f(start..end, &mut out[start..end]);
        start = end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_reference_and_is_mode_independent() {
        let a: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.11).cos()).collect();
        set_enabled(true);
        let par = dot(&a, &b);
        set_enabled(false);
        let seq = dot(&a, &b);
        set_enabled(true);
        assert_eq!(par.to_bits(), seq.to_bits());
        let reference: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((par - reference).abs() < 1e-9 * reference.abs().max(1.0));
    }

    #[test]
    fn accumulate_vec_deterministic() {
        let n = 5000;
        set_enabled(true);
        let v1 = accumulate_vec(n, 3, |r, buf| {
            for i in r {
                buf[0] += i as f64;
                buf[1] += (i as f64).sqrt();
                buf[2] += 1.0;
            }
        });
        set_enabled(false);
        let v2 = accumulate_vec(n, 3, |r, buf| {
            for i in r {
                buf[0] += i as f64;
                buf[1] += (i as f64).sqrt();
                buf[2] += 1.0;
            }
        });
        set_enabled(true);
        assert_eq!(v1, v2);
        assert_eq!(v1[2], n as f64);
    }

    #[test]
    fn fill_chunks_covers_everything() {
        let mut out = vec![0.0; 4500];
        fill_chunks(&mut out, |r, slice| {
            for (k, i) in r.enumerate() {
                slice[k] = i as f64;
            }
        });
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i as f64);
        }
    }
}
