//! Small dense kernels shared by the forward/backward passes and the NTK code.
//!
//! Everything operates on flat slices. Reductions that feed reported quantities
//! (norms, gram entries) accumulate in `f64` regardless of the working precision.

use crate::scalar::Scalar;

/// Dot product in the working precision.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators; lets the compiler vectorize.
    let mut acc = [T::zero(); 4];
    let mut chunks_a = a.chunks_exact(4);
    let mut chunks_b = b.chunks_exact(4);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        acc[0] = acc[0] + ca[0] * cb[0];
        acc[1] = acc[1] + ca[1] * cb[1];
        acc[2] = acc[2] + ca[2] * cb[2];
        acc[3] = acc[3] + ca[3] * cb[3];
    }
    let mut tail = T::zero();
    for (x, y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        tail = tail + *x * *y;
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut chunks_a = a.chunks_exact(4);
    let mut chunks_b = b.chunks_exact(4);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        acc[0] += ca[0].as_f64() * cb[0].as_f64();
        acc[1] += ca[1].as_f64() * cb[1].as_f64();
        acc[2] += ca[2].as_f64() * cb[2].as_f64();
        acc[3] += ca[3].as_f64() * cb[3].as_f64();
    }
    let mut tail = 0.0f64;
    for (x, y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        tail += x.as_f64() * y.as_f64();
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// L2 norm accumulated in `f64`.
#[inline]
pub fn l2_norm<T: Scalar>(a: &[T]) -> f64 {
    dot_f64(a, a).sqrt()
}
