//! Scalar abstraction for the numeric core.

use num_traits::ToPrimitive;

/// Floating-point scalar the geometry and numeric kernels are generic over.
///
/// Implemented for `f32` and `f64`; every generic type in this crate defaults
/// to `f64`.
pub trait Real: nalgebra::RealField + ToPrimitive + Copy {}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant into the working scalar type.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Convert the working scalar back to `f64` (for reporting and I/O).
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("real scalar converts to f64")
}
