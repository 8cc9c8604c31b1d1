//! Search, distill, and evaluate lightweight multi-scale CNN classifiers
//! for defect detection in electroluminescence images of PV cells.
//!
//! The crate is generic over the floating-point element type; `f32` is the
//! training default and `f64` backs high-precision checks. Concrete type
//! aliases for both live at the crate root.

pub mod autodiff;
pub mod error;
pub mod rng;
pub mod scalar;
pub mod netbuilder;
pub mod searchspace;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dynamic-rank tensor in the default training precision.
pub type Tensor32 = ndarray::ArrayD<f32>;
/// Dynamic-rank tensor in double precision.
pub type Tensor64 = ndarray::ArrayD<f64>;
