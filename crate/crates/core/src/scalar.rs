//! Float abstraction so the same network code runs in f32 for training and
//! f64 for finite-difference gradient checks.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};

/// Element type of tensors. GEMM dispatches to the BLAS-style kernels in
/// `matrixmultiply`; everything else is plain scalar math.
pub trait Scalar: Float + NumAssign + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C(m,n) = alpha * opA(A) * opB(B) + beta * C, all row-major.
    /// `ta` reads A as the transpose of a stored (k,m) matrix; `tb` likewise
    /// for B stored as (n,k).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! strides {
    ($t:expr, $rows:expr, $cols:expr) => {
        // stored row-major as (rows, cols); transposed view swaps strides
        if $t {
            (1isize, $rows as isize)
        } else {
            ($cols as isize, 1isize)
        }
    };
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = strides!(ta, m, k);
        let (rsb, csb) = strides!(tb, k, n);
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
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = strides!(ta, m, k);
        let (rsb, csb) = strides!(tb, k, n);
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
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        b: &[f64],
    ) -> Vec<f64> {
        let get_a = |i: usize, j: usize| if ta { a[j * m + i] } else { a[i * k + j] };
        let get_b = |i: usize, j: usize| if tb { b[j * k + i] } else { b[i * n + j] };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|l| get_a(i, l) * get_b(l, j)).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_all_transpose_combinations() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| i as f64 * 0.7 - 2.0).collect();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let expect = naive(ta, tb, m, k, n, &a, &b);
            let mut c = vec![0.0f64; m * n];
            f64::gemm(ta, tb, m, k, n, 1.0, &a, &b, 0.0, &mut c);
            for (&got, &want) in c.iter().zip(expect.iter()) {
                assert!((got - want).abs() < 1e-12, "ta={ta} tb={tb}");
            }
            let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            let mut c32 = vec![0.0f32; m * n];
            f32::gemm(ta, tb, m, k, n, 1.0, &a32, &b32, 0.0, &mut c32);
            for (&got, &want) in c32.iter().zip(expect.iter()) {
                assert!((got as f64 - want).abs() < 1e-4, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = [1.0f64, 2.0];
        let b = [3.0f64, 4.0];
        let mut c = [10.0f64];
        f64::gemm(false, false, 1, 2, 1, 1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c[0], 10.0 + 11.0);
    }
}
