//! Numeric abstraction used by the metric and retrieval code.
//!
//! Metrics are ratios of counts, so they can be evaluated exactly with
//! [`num_rational::Ratio`] or approximately with `f32`/`f64`. Retrieval needs
//! square roots and is therefore restricted to [`RealScalar`].

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Float, Num, ToPrimitive};

/// A number type metrics can be computed in.
pub trait Scalar: Num + Copy + PartialOrd + Debug + ToPrimitive + Send + Sync + 'static {
    /// Converts a count into the scalar type exactly.
    fn from_count(n: usize) -> Self;

    /// `numerator / denominator`, with `0` when the denominator is zero.
    fn ratio(numerator: usize, denominator: usize) -> Self {
        if denominator == 0 {
            Self::zero()
        } else {
            Self::from_count(numerator) / Self::from_count(denominator)
        }
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn from_count(n: usize) -> Self {
        n as f32
    }
}

impl Scalar for f64 {
    fn from_count(n: usize) -> Self {
        n as f64
    }
}

impl Scalar for Ratio<i64> {
    fn from_count(n: usize) -> Self {
        Ratio::from_integer(n as i64)
    }
}

impl Scalar for Ratio<i128> {
    fn from_count(n: usize) -> Self {
        Ratio::from_integer(n as i128)
    }
}

/// Floating point scalars (`f32`, `f64`).
pub trait RealScalar: Scalar + Float {}

impl RealScalar for f32 {}
impl RealScalar for f64 {}
