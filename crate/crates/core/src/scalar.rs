//! Scalar abstraction shared by every numerical module.
//!
//! All geometry and linear algebra is written against [`Real`], which is
//! implemented for `f32` and `f64`. Complex quantities are `Complex<T>`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating point type the solver is generic over.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn c(x: f64) -> Self;

    /// Conversion from a count.
    fn from_usize_lossy(n: usize) -> Self {
        Self::c(n as f64)
    }

    fn to_f64_lossy(self) -> f64;

    /// `C <- alpha * A * B + beta * C` on strided complex storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the given shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn cgemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Complex<Self>,
        a: *const Complex<Self>,
        rsa: isize,
        csa: isize,
        b: *const Complex<Self>,
        rsb: isize,
        csb: isize,
        beta: Complex<Self>,
        c: *mut Complex<Self>,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline(always)]
            fn c(x: f64) -> Self {
                x as $t
            }

            #[inline(always)]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            unsafe fn cgemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Complex<Self>,
                a: *const Complex<Self>,
                rsa: isize,
                csa: isize,
                b: *const Complex<Self>,
                rsb: isize,
                csb: isize,
                beta: Complex<Self>,
                c: *mut Complex<Self>,
                rsc: isize,
                csc: isize,
            ) {
                use matrixmultiply::CGemmOption;
                // Complex<T> is #[repr(C)] { re, im }, identical to [T; 2].
                $gemm(
                    CGemmOption::Standard,
                    CGemmOption::Standard,
                    m,
                    k,
                    n,
                    [alpha.re, alpha.im],
                    a as *const [$t; 2],
                    rsa,
                    csa,
                    b as *const [$t; 2],
                    rsb,
                    csb,
                    [beta.re, beta.im],
                    c as *mut [$t; 2],
                    rsc,
                    csc,
                )
            }
        }
    };
}

impl_real!(f64, matrixmultiply::zgemm);
impl_real!(f32, matrixmultiply::cgemm);

/// Imaginary unit.
#[inline(always)]
pub fn imag_unit<T: Real>() -> Complex<T> {
    Complex::new(T::zero(), T::one())
}

/// Complex zero.
#[inline(always)]
pub fn czero<T: Real>() -> Complex<T> {
    Complex::new(T::zero(), T::zero())
}

/// Real number as complex.
#[inline(always)]
pub fn creal<T: Real>(x: T) -> Complex<T> {
    Complex::new(x, T::zero())
}

/// Euclidean norm of a complex vector.
pub fn cnorm<T: Real>(v: &[Complex<T>]) -> T {
    v.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<Complex<f64>> = (0..6).map(|i| Complex::new(i as f64, 1.0 - i as f64)).collect();
        let b: Vec<Complex<f64>> = (0..6).map(|i| Complex::new(0.5 * i as f64, 2.0)).collect();
        // a: 2x3 row-major, b: 3x2 row-major
        let mut c = vec![czero::<f64>(); 4];
        unsafe {
            f64::cgemm(
                2,
                3,
                2,
                creal(1.0),
                a.as_ptr(),
                3,
                1,
                b.as_ptr(),
                2,
                1,
                czero(),
                c.as_mut_ptr(),
                2,
                1,
            );
        }
        for i in 0..2 {
            for j in 0..2 {
                let mut s = czero::<f64>();
                for l in 0..3 {
                    s += a[i * 3 + l] * b[l * 2 + j];
                }
                assert!((s - c[i * 2 + j]).norm() < 1e-12);
            }
        }
    }
}
