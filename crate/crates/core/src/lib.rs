//! Variational Bayesian sparse Gaussian process regression.
//!
//! The latent function is summarized by a small set of inducing variables
//! living in a rotated input space, which makes their covariance independent
//! of the kernel hyperparameters. The hyperparameters themselves get a
//! Gaussian posterior, and the evidence lower bound splits into a sum over
//! data blocks plus a global term, so it can be maximized by stochastic
//! gradient ascent on mini-batches of blocks.
//!
//! Supported noise structures: DTC (white noise), FIC/FITC (diagonal),
//! PITC/PIC (block diagonal). PIC additionally conditions predictions on the
//! training block nearest to the test point.

#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod elbo;
pub mod error;
pub mod evaluation;
pub mod expectations;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod pipeline;
pub mod predict;
pub mod prior;
pub mod problem;
pub mod svi;

pub use elbo::{ElboBreakdown, VariationalState};
pub use error::{Error, Result};
pub use expectations::{HyperGrad, HyperPosterior};
pub use kernel::{InducingSet, KernelParams};
pub use noise::{NoiseModel, NoiseParams, Variant};
pub use prior::{HyperPrior, PriorPreset};
pub use problem::Problem;
pub use svi::{GradientBundle, Schedule, StepRule, TrainConfig};
