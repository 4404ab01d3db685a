//! Bayesian neural network dynamics models trained with functional priors
//! derived from black-box simulators.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernels`]: scalar isotropic kernels and curl-free matrix-valued kernels.
//! - [`score`]: score estimators (Gaussian fit, spectral Stein, curl-free
//!   nonparametric with ν-method or Tikhonov regularization).
//! - [`sim_priors`]: simulator + GP-gap stochastic process priors, sampled on
//!   measurement sets.
//! - [`simulators`]: ideal and "real" pendulum, sinusoid task, dataset generation.
//! - [`bnn`]: MLP function class, particle ensembles, vector-Jacobian products.
//! - [`trainers`]: functional SVGD (with GP or simulator priors), weight-space VI,
//!   functional VI, SysID and GreyBox baselines.
//! - [`evaluation`]: NLL, RMSE, calibration and curve export.
//! - [`experiments`]: configuration-driven experiment runners used by the CLI.

pub mod bnn;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod kernels;
pub mod linalg;
pub mod score;
pub mod sim_priors;
pub mod simulators;
pub mod trainers;

pub use error::{Error, Result};
