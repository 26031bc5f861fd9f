//! Scalar abstraction for the linear-algebra layer.
//!
//! Operators and states are generic over a real field `T` (in practice `f32`
//! or `f64`); matrix entries are `Complex<T>`. Numerical tolerances quoted in
//! f64 terms are floored at a multiple of the type's machine epsilon so the
//! same validation code is meaningful for both precisions.

use nalgebra::{Complex, RealField};
use num_traits::FromPrimitive;

/// Real scalar usable as the base field of operators and states.
pub trait Real: RealField + Copy + FromPrimitive {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Converts `T` back to `f64` for reporting.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    nalgebra::try_convert::<T, f64>(x).unwrap_or(f64::NAN)
}

/// Complex number from real and imaginary `f64` parts.
#[inline]
pub fn cplx<T: Real>(re: f64, im: f64) -> Complex<T> {
    Complex::new(lit(re), lit(im))
}

/// `tol` in f64 units, but never tighter than `1e4 * eps` of `T`.
#[inline]
pub fn tolerance<T: Real>(tol: f64) -> T {
    let floor = T::default_epsilon() * lit(1.0e4);
    let t = lit::<T>(tol);
    if t > floor {
        t
    } else {
        floor
    }
}

/// Shorthand for `Complex<f64>`.
pub type C64 = Complex<f64>;

/// `e^{iθ}`.
#[inline]
pub fn expi<T: Real>(theta: T) -> Complex<T> {
    Complex::new(theta.cos(), theta.sin())
}
