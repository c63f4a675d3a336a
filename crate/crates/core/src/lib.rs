//! Bayesian calibration of numerical simulators.
//!
//! Four statistical models link a simulator `f(x, θ)` to field measurements:
//!
//! | model | mean                 | extra covariance           |
//! |-------|----------------------|----------------------------|
//! | M1    | code                 | none                       |
//! | M2    | GP emulator of code  | emulator predictive cov    |
//! | M3    | code                 | discrepancy GP             |
//! | M4    | GP emulator of code  | emulator cov + discrepancy |
//!
//! All models add white measurement noise `σ_e²·I`. Emulator hyperparameters
//! are estimated by maximum likelihood first and then held fixed while the
//! posterior over the calibration parameters is sampled with a two-stage
//! adaptive MCMC (componentwise Metropolis-within-Gibbs followed by a joint
//! random-walk Metropolis–Hastings using the covariance learned in stage one).

pub mod calibration;
pub mod code;
pub mod data;
pub mod design;
pub mod diagnostics;
pub mod emulator;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod persist;
pub mod priors;
pub mod sampler;
pub mod seqdesign;

pub use error::{Error, Result};
