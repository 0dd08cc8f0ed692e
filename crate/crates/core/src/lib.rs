//! Switchable activation networks: per-unit learnable gates trained under
//! sparsity and compute regularizers, exported as compact dense networks.
//!
//! The crate is organised bottom-up: [`tensor`] and [`ops`] hold the numeric
//! primitives, [`gate`] and [`objective`] the gating mechanics and the
//! regularized loss, [`model`] the layer graph, [`train`] the optimizer loop,
//! [`deploy`] recalibration, pruning and checkpoints, and [`baseline`] the
//! matched-budget comparison against dropout and magnitude channel pruning.

pub mod baseline;
pub mod config;
pub mod data;
pub mod deploy;
mod error;
pub mod gate;
pub mod model;
pub mod objective;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
