//! Scalar abstraction: every numeric kernel in this crate is generic over a
//! floating-point type. `f64` is the default used by the CLI, the solvers and
//! the verification suites; `f32` is available for memory-bound experiments.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

/// Floating-point scalar usable throughout the crate: `f32` or `f64`.
///
/// The conversions are direct casts (not `FromPrimitive`'s fallible path)
/// so they inline to nothing for `f64` and keep hot loops branch-free.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Conversion from an `f64` literal (narrowing for `f32`).
    fn c(v: f64) -> Self;

    /// Conversion to `f64` (exact for `f64`, widening for `f32`).
    fn to_f64_c(self) -> f64;

    /// Conversion from a usize count.
    fn from_count(n: usize) -> Self {
        Self::c(n as f64)
    }
}

impl Scalar for f32 {
    #[inline(always)]
    fn c(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn to_f64_c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn c(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn to_f64_c(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_round_trip() {
        assert_eq!(f64::c(0.5), 0.5);
        assert_eq!(f32::c(0.5), 0.5f32);
        assert_eq!(f64::from_count(42), 42.0);
    }
}
