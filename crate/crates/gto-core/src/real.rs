use core::fmt::{Debug, Display};
use num_traits::float::FloatConst;
use num_traits::Float;

/// Scalar type the engine is generic over.
///
/// Training runs in `f32`, gradient checks and reproducibility harnesses in
/// `f64`. Transcendentals come from `num-traits`, which routes through `libm`
/// when the crate is built without `std`.
pub trait Real: Float + FloatConst + Debug + Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting literals into the active scalar type.
#[inline]
pub fn r<R: Real>(x: f64) -> R {
    R::from_f64(x)
}

/// f64 math that works without `std`, routed through num-traits/libm.
pub(crate) mod fm {
    use num_traits::Float;

    #[inline]
    pub fn sqrt(x: f64) -> f64 {
        Float::sqrt(x)
    }

    #[inline]
    pub fn powi(x: f64, n: i32) -> f64 {
        Float::powi(x, n)
    }

    #[inline]
    pub fn exp(x: f64) -> f64 {
        Float::exp(x)
    }

    #[inline]
    pub fn round(x: f64) -> f64 {
        Float::round(x)
    }

    #[inline]
    pub fn cbrt(x: f64) -> f64 {
        Float::cbrt(x)
    }
}
