//! Minimal reverse-mode autodiff for dense CNN training on CPU.

mod kernels;
mod param;
mod tape;

pub use kernels::{conv_macs, ConvMeta};
pub use param::{he_normal, ones, zeros, ParamCell, ParamSet};
pub use tape::{NodeId, Tape};

#[cfg(test)]
mod tests;
