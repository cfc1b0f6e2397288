use std::fmt::Debug;

use num_traits::{FromPrimitive, Num, ToPrimitive};

/// Numeric type used for rates, prices and costs.
///
/// Implemented for `f32`, `f64` and `Ratio<i64>`; the rational instance gives
/// exact confusion-matrix rates and cost ledgers.
pub trait Scalar: Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug {
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar type")
    }

    /// `num / den`, or `None` when the denominator is zero.
    fn ratio(num: u64, den: u64) -> Option<Self> {
        (den != 0).then(|| Self::from_count(num) / Self::from_count(den))
    }

    fn half() -> Self {
        Self::one() / (Self::one() + Self::one())
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where T: Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug {}
