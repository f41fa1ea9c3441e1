//! Scalar abstraction: the numeric core is generic over `f32`/`f64`.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    /// Shorthand for lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal not representable")
    }

    /// Lossy conversion to `f64` for reporting and metrics.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl<T> Real for T where
    T: Float
        + NumAssignOps
        + FromPrimitive
        + ToPrimitive
        + ScalarOperand
        + std::fmt::Debug
        + std::fmt::Display
        + std::iter::Sum
        + Default
        + Send
        + Sync
        + 'static
{
}
