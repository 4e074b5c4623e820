//! Spatial-temporal-fusion (STF) Bayesian neural networks: a deterministic ReLU MLP whose
//! first layer is replaced by a mean-field Gaussian posterior, together with
//! the tools to train, evaluate and bound such models.

// `!(x >= 0.0)` is the NaN-rejecting form of a range check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod bayes;
pub mod bounds;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod nn;
pub mod rng;
pub mod stability;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use nn::{Activation, DenseLayer, MlpModel};
pub use rng::Prng;
pub use tensor::Tensor;
