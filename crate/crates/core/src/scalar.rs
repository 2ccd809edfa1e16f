//! Floating-point element types the network can run on.
//!
//! Training runs in `f32`; `f64` is the gradient-checking mode. Everything
//! numeric in the crate is written once against [`Scalar`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::fastmath;

pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name used in diagnostics.
    const NAME: &'static str;

    fn erf(self) -> Self;

    /// In-place element-wise `exp`.
    fn exp_slice(xs: &mut [Self]);

    /// In-place element-wise `erf`.
    fn erf_slice(xs: &mut [Self]);

    /// Strided general matrix multiply `C = alpha·A·B + beta·C`.
    ///
    /// `A` is `m×k`, `B` is `k×n`, `C` is `m×n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Scalar")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

/// Largest element a strided view can touch, plus one.
fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $erf:path, $exp_slice:path, $erf_slice:path, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }

            fn exp_slice(xs: &mut [Self]) {
                $exp_slice(xs)
            }

            fn erf_slice(xs: &mut [Self]) {
                $erf_slice(xs)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= extent(m, k, a_strides), "gemm: A buffer too short");
                assert!(b.len() >= extent(k, n, b_strides), "gemm: B buffer too short");
                assert!(c.len() >= extent(m, n, c_strides), "gemm: C buffer too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every element the kernel addresses lies inside the
                // slices checked above, and `c` is exclusively borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

fn exp_each(xs: &mut [f64]) {
    for v in xs {
        *v = v.exp();
    }
}

fn erf_each(xs: &mut [f64]) {
    for v in xs {
        *v = libm::erf(*v);
    }
}

// f32 runs the vectorizable kernels; f64 keeps libm accuracy for gradient checks.
impl_scalar!(f32, "f32", libm::erff, fastmath::exp_slice, fastmath::erf_slice, matrixmultiply::sgemm);
impl_scalar!(f64, "f64", libm::erf, exp_each, erf_each, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_points() {
        assert!((Scalar::erf(1.0f64) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert_eq!(Scalar::erf(0.0f32), 0.0);
    }

    #[test]
    fn gemm_handles_transposed_strides() {
        // A = [[1,2],[3,4]] stored transposed (column-major).
        let a_t = [1.0f64, 3.0, 2.0, 4.0];
        let b = [5.0f64, 6.0];
        let mut c = [0.0f64; 2];
        f64::gemm(2, 2, 1, 1.0, &a_t, (1, 2), &b, (1, 1), 0.0, &mut c, (1, 1));
        assert_eq!(c, [17.0, 39.0]);
    }
}
