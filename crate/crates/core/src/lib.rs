//! Derivative-free estimates of a black-box classifier's log-probability
//! gradient, preconditioned by the covariance of diffusion-denoised
//! particle ensembles, and their use for feature attribution and
//! counterfactual generation.

pub mod attribution;
pub mod counterfactual;
pub mod diffusion;
pub mod enkf;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod models;
pub mod rng;

pub use error::{Error, Result};
