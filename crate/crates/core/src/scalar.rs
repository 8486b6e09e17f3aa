//! Scalar abstraction for the numeric core.
//!
//! The tape engine and the finite-difference oracle are generic over the
//! element type so they can run at `f32` or `f64`. The rest of the crate
//! works through the `f64` aliases exported from the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element type accepted by the tape engine.
pub trait Scalar:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for literals and config values.
    fn from_f64(v: f64) -> Self;

    /// Widening conversion back to `f64` for reporting.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
