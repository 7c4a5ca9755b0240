//! Floating-point scalar abstraction shared by every numeric kernel.
//!
//! Models train in `f32`; `f64` exists so finite-difference gradient checks
//! have tolerances worth asserting.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Real scalar usable by tensors, layers, the frontend and the optimizer.
pub trait Scalar:
    Float + FftNum + NumAssign + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display
{
    /// `C = alpha * A * B + beta * C` with explicit row/column strides.
    ///
    /// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    /// Lossless-where-possible conversion from `f64`.
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices whose extents cover the strided views;
        // `check_extent` enforces this in debug builds.
        debug_assert!(check_extent(m, k, rsa, csa, a.len()));
        debug_assert!(check_extent(k, n, rsb, csb, b.len()));
        debug_assert!(check_extent(m, n, rsc, csc, c.len()));
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        debug_assert!(check_extent(m, k, rsa, csa, a.len()));
        debug_assert!(check_extent(k, n, rsb, csb, b.len()));
        debug_assert!(check_extent(m, n, rsc, csc, c.len()));
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

fn check_extent(rows: usize, cols: usize, rs: isize, cs: isize, len: usize) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    rs >= 0 && cs >= 0 && (last as usize) < len
}

/// Row-major `C = A * B` (overwrites `c`).
pub(crate) fn matmul<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::zero(),
        c,
        n as isize,
        1,
    );
}

/// Row-major `C += A * B^T`, with `A: m x k`, `B: n x k`.
pub(crate) fn matmul_acc_bt<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        T::one(),
        c,
        n as isize,
        1,
    );
}

/// Row-major `C = A^T * B`, with `A: k x m`, `B: k x n`.
pub(crate) fn matmul_at<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        1,
        m as isize,
        b,
        n as isize,
        1,
        T::zero(),
        c,
        n as isize,
        1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul(2, 3, 4, &a, &b, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }

        // A^T B where A is 3x2 stored row-major.
        let at: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let mut c2 = vec![0.0; 8];
        matmul_at(2, 3, 4, &at, &b, &mut c2);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| at[p * 2 + i] * b[p * 4 + j]).sum();
                assert_eq!(c2[i * 4 + j], want);
            }
        }

        // C += A B^T with B stored 4x3.
        let bt: Vec<f64> = (0..12).map(|v| v as f64 - 5.0).collect();
        let mut c3 = vec![1.0; 8];
        matmul_acc_bt(2, 3, 4, &a, &bt, &mut c3);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..3).map(|p| a[i * 3 + p] * bt[j * 3 + p]).sum::<f64>();
                assert_eq!(c3[i * 4 + j], want);
            }
        }
    }
}
