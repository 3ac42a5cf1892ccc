//! Floating-point scalar abstraction shared by the tensor core and metrics.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c = a · b` for an `m×k` by `k×n` product. Each operand is addressed
    /// through (row stride, column stride), so transposes cost nothing.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self]);
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: &[T], sa: (isize, isize), b: &[T], sb: (isize, isize), c: &[T]) {
    let reach = |rows: usize, cols: usize, s: (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1
        }
    };
    assert!(sa.0 >= 0 && sa.1 >= 0 && sb.0 >= 0 && sb.1 >= 0);
    assert!(a.len() >= reach(m, k, sa) && b.len() >= reach(k, n, sb) && c.len() >= m * n);
}

impl Scalar for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], sa: (isize, isize), b: &[f32], sb: (isize, isize), c: &mut [f32]) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        // SAFETY: every index the strides can reach was bounds-checked above
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 0.0, c.as_mut_ptr(), n as isize, 1);
        }
    }
}

impl Scalar for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64]) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        // SAFETY: as above
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 0.0, c.as_mut_ptr(), n as isize, 1);
        }
    }
}
