//! Numeric abstractions shared by the loss, policy and metric code.

use std::fmt::{Debug, Display};

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num, NumCast};

/// Floating point scalar: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + NumCast + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from f64; used for constants and wire values.
    fn of(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 converts to every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// A value that can represent `num / den` for counts.
///
/// Implemented for the float scalars and for exact rationals so the metric
/// code can be checked against hand enumeration without rounding.
pub trait Fraction: Num + Copy + PartialOrd + Debug {
    fn from_ratio(num: u64, den: u64) -> Self;
}

impl Fraction for f32 {
    fn from_ratio(num: u64, den: u64) -> Self {
        (num as f64 / den as f64) as f32
    }
}

impl Fraction for f64 {
    fn from_ratio(num: u64, den: u64) -> Self {
        num as f64 / den as f64
    }
}

impl Fraction for Ratio<u64> {
    fn from_ratio(num: u64, den: u64) -> Self {
        Ratio::new(num, den)
    }
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln σ(x)` via the softplus identity `-ln(1 + e^(-x))`.
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
