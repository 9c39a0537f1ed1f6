//! Desk-scale compression lab for hybrid Mamba-2 / attention / FFN language
//! models.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases. Correctness checks run in
//! 64-bit, training defaults to 32-bit.

pub mod autodiff;
pub mod budget;
pub mod error;
pub mod fp8;
pub mod importance;
pub mod io;
pub mod kernels;
pub mod model;
pub mod nas;
pub mod pipeline;
pub mod pruner;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Checkpoint64 = model::Checkpoint<f64>;
