//! Dense row-major kernels used by the model and the optimizer.
//!
//! All matrices are flat row-major slices with shapes passed explicitly.
//! Products go through the `matrixmultiply` GEMM kernels, which are
//! single-threaded and use a fixed blocking, so results are reproducible.

use crate::Real;

/// `out (m×n) += a (m×k) · b (k×n)`.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(
        a.len() == m * k && b.len() == k * n && out.len() == m * n,
        "matmul shape mismatch"
    );
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: the assert above matches every slice to its shape.
    unsafe { T::gemm_acc(m, k, n, a, (k_, 1), b, (n_, 1), out, (n_, 1)) };
}

/// `a (m×k) · b (k×n)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out (k×n) += aᵀ · b` for `a (m×k)`, `b (m×n)`.
pub fn matmul_at_b_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(
        a.len() == m * k && b.len() == m * n && out.len() == k * n,
        "matmul shape mismatch"
    );
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: the assert above matches every slice to its shape.
    unsafe { T::gemm_acc(k, m, n, a, (1, k_), b, (n_, 1), out, (n_, 1)) };
}

/// `out (m×k) += a · bᵀ` for `a (m×n)`, `b (k×n)`.
pub fn matmul_a_bt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    assert!(
        a.len() == m * n && b.len() == k * n && out.len() == m * k,
        "matmul shape mismatch"
    );
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: the assert above matches every slice to its shape.
    unsafe { T::gemm_acc(m, n, k, a, (n_, 1), b, (1, n_), out, (k_, 1)) };
}

pub fn matmul_a_bt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    matmul_a_bt_acc(a, b, &mut out, m, n, k);
    out
}

/// `y += alpha · x`.
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent accumulators so the compiler can
/// vectorize the reduction.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn frobenius<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
