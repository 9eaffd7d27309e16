//! Scalar abstraction shared by every real-valued routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Real scalar the quantizer, losses and toy model are generic over.
///
/// Implemented for `f32` and `f64`. Binary file formats always store `f32`,
/// so conversions go through [`Scalar::from_f64`] / [`ToPrimitive`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Round half away from zero, the single rounding mode used by every quantizer.
    #[inline]
    fn round_half_away(self) -> Self {
        // `Float::round` on both std floats rounds ties away from zero.
        self.round()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_round_away_from_zero() {
        assert_eq!(2.5f64.round_half_away(), 3.0);
        assert_eq!((-2.5f64).round_half_away(), -3.0);
        assert_eq!(0.5f32.round_half_away(), 1.0);
        assert_eq!((-0.5f32).round_half_away(), -1.0);
        assert_eq!(0.4f32.round_half_away(), 0.0);
    }
}
