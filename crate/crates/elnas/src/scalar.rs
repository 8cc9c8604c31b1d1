//! Scalar abstraction over the floating-point element type.
//!
//! All numeric code in this crate is generic over [`Scalar`] so the same
//! kernels run in `f32` for training and in `f64` where tests need the
//! extra precision (finite-difference oracles, loss arithmetic checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, NumAssign};

/// Element type of tensors, parameters, and losses: `f32` or `f64`.
pub trait Scalar:
    Float + NumAssign + ScalarOperand + Sum + Debug + Display + Send + Sync + 'static
{
    /// Type tag recorded in checkpoints.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn from_usize(v: usize) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn from_usize(v: usize) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn from_usize(v: usize) -> Self {
        v as f64
    }

    fn as_f64(self) -> f64 {
        self
    }
}
