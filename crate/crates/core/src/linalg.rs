//! Dense row-major kernels shared by the model and the projector.
//!
//! Matrix products go through `matrixmultiply`; everything else is plain
//! loops over slices. All matrices are row-major `&[T]` with explicit shapes.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the model and projector are generic over.
///
/// `f32` is the training precision; `f64` backs the finite-difference checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize + 1
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm_raw(
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
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above keep every strided access inside the slices,
                // and `c` is borrowed mutably so it cannot alias `a` or `b`.
                unsafe {
                    $kernel(
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
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Whether an operand is used as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// `c (m×n) = [c +] op(a) · op(b)` where `op(a)` is m×k and `op(b)` is k×n.
///
/// `a` is stored row-major as m×k when `Op::N`, or k×m when `Op::T`; same for `b`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    op_a: Op,
    op_b: Op,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_raw(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Column-orthonormalize a row-major `rows × cols` matrix in place.
///
/// Modified Gram-Schmidt run twice; the second pass brings the columns back
/// to orthonormality at working precision even for mildly ill-conditioned
/// Gaussian inputs. Returns `false` if a column became numerically zero.
pub fn orthonormalize_columns(a: &mut [f64], rows: usize, cols: usize) -> bool {
    assert_eq!(a.len(), rows * cols);
    assert!(rows >= cols, "cannot orthonormalize more columns than rows");
    for j in 0..cols {
        for _pass in 0..2 {
            for p in 0..j {
                let mut dot = 0.0;
                for i in 0..rows {
                    dot += a[i * cols + p] * a[i * cols + j];
                }
                for i in 0..rows {
                    a[i * cols + j] -= dot * a[i * cols + p];
                }
            }
        }
        let norm = (0..rows).map(|i| a[i * cols + j].powi(2)).sum::<f64>().sqrt();
        if norm <= f64::EPSILON {
            return false;
        }
        for i in 0..rows {
            a[i * cols + j] /= norm;
        }
    }
    true
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![f64::NAN; m * n];
        matmul(Op::N, Op::N, m, k, n, &a, &b, &mut c, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        let mut c2 = vec![0.0; m * n];
        matmul(Op::T, Op::T, m, k, n, &at, &bt, &mut c2, false);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut c3 = want.clone();
        matmul(Op::T, Op::N, m, k, n, &at, &b, &mut c3, true);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_schmidt_produces_orthonormal_columns() {
        let (rows, cols) = (40, 9);
        let mut a: Vec<f64> = (0..rows * cols).map(|i| ((i * 7919) % 113) as f64 / 50.0 - 1.1).collect();
        assert!(orthonormalize_columns(&mut a, rows, cols));
        for p in 0..cols {
            for q in 0..cols {
                let g: f64 = (0..rows).map(|i| a[i * cols + p] * a[i * cols + q]).sum();
                let want = if p == q { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-13, "gram[{p},{q}] = {g}");
            }
        }
    }
}
