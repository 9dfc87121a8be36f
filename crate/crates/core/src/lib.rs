//! Variance-regularized training of small classifiers under label noise.
//!
//! The crate trains multilayer perceptrons on data with injected label
//! corruption, penalizing the squared difference between two independently
//! perturbed forward passes. Around that it provides the tooling to check
//! the regularizer's properties: exact input Jacobians and the Monte-Carlo
//! Jacobian-norm estimator, local intrinsic dimensionality, critical sample
//! ratio, and label precision.
//!
//! Modules:
//!
//! - [`matrix`], [`mlp`], [`loss`], [`optim`]: numerics and the classifier.
//! - [`variance_reg`]: the regularizer, the λ ramp, the combined objective.
//! - [`jacobian`]: Jacobians, the sampled norm estimator, quadratic-form
//!   variance, sample bounds.
//! - [`noise`]: transition matrices and label corruption.
//! - [`diagnostics`]: LID, CSR, label precision.
//! - [`data`], [`metrics`], [`config`], [`experiment`]: the harness.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod jacobian;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod mlp;
pub mod noise;
pub mod optim;
pub mod rng;
pub mod variance_reg;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use mlp::{Activation, MlpModel};
pub use rng::RngStream;
