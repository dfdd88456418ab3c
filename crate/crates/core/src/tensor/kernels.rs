//! Dense kernels with a sequential path and a rayon path.
//!
//! Every output element is produced by exactly one worker with a fixed
//! reduction order, so both paths are bitwise identical.

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the parallel path falls back to sequential.
const PAR_MIN_WORK: usize = 1 << 15;

#[inline]
fn gemm_row<T: Scalar>(arow: &[T], b: &[T], n: usize, crow: &mut [T]) {
    for (p, &av) in arow.iter().enumerate() {
        if av == T::zero() {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for (c, &bv) in crow.iter_mut().zip(brow) {
            *c += av * bv;
        }
    }
}

/// `c += a[m×k] · b[k×n]`, single-threaded.
pub fn gemm_seq<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    for (i, crow) in c.chunks_mut(n).enumerate() {
        gemm_row(&a[i * k..(i + 1) * k], b, n, crow);
    }
}

/// `c += a[m×k] · b[k×n]`, rows of `c` split across the rayon pool.
#[cfg(feature = "parallel")]
pub fn gemm_par<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    c.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, crow)| gemm_row(&a[i * k..(i + 1) * k], b, n, crow));
}

/// `c += a · b`, picking the parallel path for large products when enabled.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        return gemm_par(m, k, n, a, b, c);
    }
    let _ = PAR_MIN_WORK;
    gemm_seq(m, k, n, a, b, c)
}

/// Row-major transpose of an `r×c` matrix.
pub fn transpose<T: Scalar>(r: usize, c: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Applies `f(g, chunk)` to each of the `g`-indexed equal-size chunks of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Scalar,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if out.len() >= PAR_MIN_WORK {
        out.par_chunks_mut(chunk).enumerate().for_each(|(g, c)| f(g, c));
        return;
    }
    out.chunks_mut(chunk).enumerate().for_each(|(g, c)| f(g, c));
}

/// Batched `c[g] = a[g] · b[g]` over `groups` independent products.
pub fn bmm<T: Scalar>(groups: usize, m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); groups * m * n];
    for_each_chunk(&mut c, m * n, |g, cg| {
        gemm_seq(m, k, n, &a[g * m * k..(g + 1) * m * k], &b[g * k * n..(g + 1) * k * n], cg)
    });
    c
}

/// Batched `c[g] = a[g] · b[g]ᵀ` with `a[g]: m×k`, `b[g]: n×k`.
pub fn bmm_nt<T: Scalar>(groups: usize, m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); groups * m * n];
    for_each_chunk(&mut c, m * n, |g, cg| {
        let bt = transpose(n, k, &b[g * n * k..(g + 1) * n * k]);
        gemm_seq(m, k, n, &a[g * m * k..(g + 1) * m * k], &bt, cg)
    });
    c
}

/// Batched `c[g] = a[g]ᵀ · b[g]` with `a[g]: k×m`, `b[g]: k×n`.
pub fn bmm_tn<T: Scalar>(groups: usize, k: usize, m: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); groups * m * n];
    for_each_chunk(&mut c, m * n, |g, cg| {
        let at = transpose(k, m, &a[g * k * m..(g + 1) * k * m]);
        gemm_seq(m, k, n, &at, &b[g * k * n..(g + 1) * k * n], cg)
    });
    c
}
