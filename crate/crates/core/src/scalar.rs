//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Everything is written against [`Scalar`], which is implemented for `f32`
//! and `f64`. Tolerances quoted in the tests assume `f64`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating point scalar: `f32` or `f64`.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + std::fmt::Debug + Send + Sync + 'static
{
    /// Converts a literal. Never fails for finite `f64` input.
    #[inline]
    fn lit(value: f64) -> Self {
        <Self as FromPrimitive>::from_f64(value).expect("literal representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(value: usize) -> Self {
        Self::lit(value as f64)
    }

    /// Relative level under which a variance is indistinguishable from
    /// accumulated rounding error.
    #[inline]
    fn variance_floor() -> Self {
        let scaled = Self::default_epsilon() * Self::lit(1e4);
        scaled * scaled
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
