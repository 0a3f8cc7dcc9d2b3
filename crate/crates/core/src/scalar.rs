//! Numeric traits shared by the generic parts of the crate.
//!
//! [`Scalar`] is the minimum the loss, worst-case and post-stratification
//! code needs: field arithmetic and a total-enough order. It is satisfied by
//! `f32`, `f64` and exact rationals such as [`num_rational::Rational64`].
//! [`Real`] adds the transcendental operations the network needs.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, Num, Signed, ToPrimitive};

pub trait Scalar:
    Num + Signed + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Converts a literal. Panics only if the literal is not representable,
    /// which for the constants used in this crate cannot happen.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal not representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable in scalar type")
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    /// `max(self, 0)`.
    fn positive_part(self) -> Self {
        self.max_of(Self::zero())
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// False only for float NaN/inf; rationals are always finite.
    fn is_finite_value(self) -> bool {
        self.to_f64().is_some_and(f64::is_finite)
    }
}

impl<T> Scalar for T where
    T: Num
        + Signed
        + Copy
        + PartialOrd
        + FromPrimitive
        + ToPrimitive
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Floating-point scalars (`f32`, `f64`).
pub trait Real: Scalar + Float {}

impl<T: Scalar + Float> Real for T {}

/// Ordering for sorts; incomparable pairs (NaN) compare equal.
pub(crate) fn cmp_partial<T: PartialOrd>(a: &T, b: &T) -> std::cmp::Ordering {
    a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;

    #[test]
    fn helpers_agree_across_types() {
        assert_eq!(f64::lit(0.5).positive_part(), 0.5);
        assert_eq!((-2.0f32).positive_part(), 0.0);
        let half = Rational64::lit(0.5);
        assert_eq!(half, Rational64::new(1, 2));
        assert_eq!(Rational64::from_count(3).min_of(half), half);
        assert!(Rational64::new(1, 3).is_finite_value());
        assert!(!f64::NAN.is_finite_value());
    }
}
