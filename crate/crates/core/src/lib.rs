//! Internal node bagging: train a network whose hidden nodes are backed by
//! groups of member nodes under stochastic mask sampling, periodically reset
//! the members of each group to their mean, and analytically combine every
//! group into a single node for inference. The deployment model carries 1/n
//! of the grouped layers' parameters.
//!
//! Numerics are generic over the scalar type: training runs in `f32`, the
//! oracle and gradient tests run the same code in `f64`. See [`Tensor32`] /
//! [`Tensor64`] and the [`Scalar`] trait.

pub mod bagging;
pub mod check;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod model_io;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Oracle/test-precision tensor.
pub type Tensor64 = Tensor<f64>;

/// Training-precision model.
pub type Model32 = model::Model<f32>;
/// Oracle/test-precision model.
pub type Model64 = model::Model<f64>;
