//! Scalar abstraction: every numerical routine in this crate is generic over
//! the floating point type through [`Scalar`], with `f32` and `f64` as the
//! provided instantiations.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by all estimators and decompositions.
///
/// `RealField` supplies the linear-algebra surface (eigen/SVD/QR through
/// nalgebra), `FromPrimitive`/`ToPrimitive` the conversions used for
/// tolerances, RNG draws and diagnostics.
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive {}

impl<T> Scalar for T where T: RealField + Copy + FromPrimitive + ToPrimitive {}

/// Convert an `f64` constant (tolerance, literal, RNG draw) to `T`.
#[inline]
pub fn cst<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite f64 constant must convert")
}

/// Convert a scalar back to `f64` for diagnostics and reports.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("scalar must convert to f64")
}
