//! Scalar abstraction for the numerical core.
//!
//! Everything downstream (grids, spectral transforms, PDE solves, path
//! simulation) is generic over [`Real`], which is satisfied by `f32` and
//! `f64`. The concrete aliases at the crate root pin the shipped pipeline to
//! `f64`; the trait exists so the kernels can be instantiated and tested at
//! other precisions.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, Signed, ToPrimitive};
use rustfft::FftNum;

/// Floating-point scalar usable by every kernel in this crate.
///
/// The supertraits are the union of what the spectral layer (`FftNum`), the
/// numeric layer (`Float`, `FloatConst`, `Signed`) and reporting
/// (`Display`/`LowerExp`) require. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Signed
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Display
    + LowerExp
    + Debug
    + Send
    + Sync
    + FftNum
    + 'static
{
    /// Lossy conversion from `f64`; panics only if the value is not
    /// representable at all (never for finite inputs at f32/f64).
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 must convert to a Real scalar")
    }

    /// Round-trip to `f64` for reporting and file formats.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Real scalar must convert to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Euclidean norm of a slice.
#[inline]
pub fn norm2<T: Real>(v: &[T]) -> T {
    v.iter().map(|&a| a * a).sum::<T>().sqrt()
}

/// Dot product of two slices of equal length.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Dense row-major matrix-vector product: `out = m * v`, `m` is `rows x cols`.
#[inline]
pub fn mat_vec<T: Real>(m: &[T], rows: usize, cols: usize, v: &[T], out: &mut [T]) {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        out[r] = dot(&m[r * cols..(r + 1) * cols], v);
    }
}

/// Frobenius norm of a dense matrix stored as a flat slice.
#[inline]
pub fn frobenius<T: Real>(m: &[T]) -> T {
    norm2(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn of_and_back() {
        let x: f64 = Real::of(0.5);
        assert_eq!(x, 0.5);
        let y: f32 = Real::of(0.25);
        assert_eq!(y, 0.25f32);
        assert_eq!(0.5f64.to_f64_lossy(), 0.5);
    }

    #[test]
    fn small_linear_algebra() {
        let m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let v = [1.0, 0.0, -1.0];
        let mut out = [0.0; 2];
        mat_vec(&m, 2, 3, &v, &mut out);
        assert_eq!(out, [-2.0, -2.0]);
        assert_eq!(dot(&v, &v), 2.0);
        assert!((norm2(&v) - 2.0f64.sqrt()).abs() < 1e-15);
    }
}
