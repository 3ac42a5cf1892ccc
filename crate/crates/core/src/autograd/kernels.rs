//! Plain loops over row-major buffers.

use crate::scalar::Scalar;

/// `a[m x k] · b[k x n]`
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), &mut out);
    out
}

/// `a[m x k] · b[n x k]ᵀ`
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), &mut out);
    out
}

/// `a[r x p]ᵀ · b[r x q]`
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], r: usize, p: usize, q: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * q];
    T::gemm(p, r, q, a, (1, p as isize), b, (q as isize, 1), &mut out);
    out
}

pub(crate) fn transpose<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_axis<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..len {
                let e = (x[idx(k)] - m).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    out
}
