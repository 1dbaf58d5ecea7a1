use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Scalar type for all numeric code: implemented for `f32` and `f64`.
///
/// `f64` is the checking mode (gradient verification, oracles); `f32` is the
/// run mode for full training runs.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Convert an `f64` constant into this scalar type.
    #[inline]
    fn from_c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant converts to scalar")
    }

    /// Widen to `f64` for reporting and serialization.
    #[inline]
    fn into_f64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    /// Narrow to `f32` for checkpoint payloads.
    #[inline]
    fn into_f32(self) -> f32 {
        self.to_f32().expect("scalar narrows to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
