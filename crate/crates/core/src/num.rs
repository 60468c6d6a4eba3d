//! Scalar abstraction shared by the metrics and the estimator.
//!
//! Byte counts and peer counts are integers; everything derived from them
//! (overheads, slowdowns, modelled traffic) is a ratio. Computing those ratios
//! in a generic scalar lets the same code run in `f64` for reporting and in
//! exact big rationals for the identities the test-suite checks.

use std::fmt::{Debug, Display};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Num, ToPrimitive};

pub trait Scalar: Num + Clone + PartialOrd + Debug + Display + FromPrimitive + ToPrimitive {
    fn from_count(v: u64) -> Self {
        Self::from_u64(v).expect("every u64 is representable")
    }

    fn from_bytes(v: u128) -> Self {
        Self::from_u128(v).expect("every u128 is representable")
    }

    /// Lossless for exact scalars, identity for floats.
    fn from_real(v: f64) -> Self {
        Self::from_f64(v).expect("finite value")
    }

    fn approx(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Nearest integer as decimal text, for byte totals in reports.
    fn round_bytes(&self) -> String {
        format!("{:.0}", self.approx())
    }

    fn max_of(a: Self, b: Self) -> Self {
        if a >= b {
            a
        } else {
            b
        }
    }
}

impl Scalar for f64 {}
impl Scalar for f32 {}

impl Scalar for BigRational {
    fn from_bytes(v: u128) -> Self {
        BigRational::from_integer(BigInt::from(v))
    }

    fn from_real(v: f64) -> Self {
        BigRational::from_float(v).expect("finite value")
    }

    fn round_bytes(&self) -> String {
        round_exact(self).to_string()
    }
}

/// Rounds an exact quantity to the nearest integer, halves away from zero.
pub fn round_exact(v: &BigRational) -> BigInt {
    v.round().to_integer()
}

pub fn is_zero<T: Scalar>(v: &T) -> bool {
    v.is_zero()
}
