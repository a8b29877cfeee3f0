//! Transfer-learning experiment framework on synthetic fundus-like tasks.
//!
//! A classifier is pretrained on a source task, its weights are carried over
//! as the starting point for a data-poor target task, and the resulting
//! models are compared against direct training over a grid of reduced
//! training-set sizes and seeds.
//!
//! The numeric core ([`neuralnet`]) is generic over the scalar type through
//! [`Scalar`]; training and checkpoints use `f32`, the aliases below name the
//! concrete instantiations used throughout the crate.

pub mod datapipe;
pub mod error;
pub mod metrics;
pub mod neuralnet;
pub mod scalar;
pub mod seed;
pub mod sweep;
pub mod synthfundus;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the unit of training and checkpointing.
pub type Tensor = neuralnet::Tensor<f32>;
/// Double-precision tensor, used by gradient oracles.
pub type Tensor64 = neuralnet::Tensor<f64>;
/// Network weights as stored in checkpoints.
pub type Params = neuralnet::ParameterVector<f32>;
/// Double-precision weights.
pub type Params64 = neuralnet::ParameterVector<f64>;
/// Autodiff tape over `f32`.
pub type Tape = neuralnet::Tape<f32>;
/// Autodiff tape over `f64`.
pub type Tape64 = neuralnet::Tape<f64>;
