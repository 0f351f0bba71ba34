//! Lipschitz-regularized model-based approximate value iteration.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: dense networks with exact reverse-mode gradients, Adam, checkpoints.
//! - [`env`]: a deterministic cart-pole, dataset collection and policy evaluation.
//! - [`dynamics`]: deterministic / Gaussian transition models and ensembles.
//! - [`regularize`]: spectral normalization and FGSM/PGD robust regularization.
//! - [`agent`]: the value-iteration loop (policy ascent then value regression).
//! - [`diagnostics`]: Lipschitz bounds, value-aware model error, regression error.
//! - [`harness`]: experiment configs, seeded runs, sweeps and CSV reports.

pub mod agent;
pub mod diagnostics;
pub mod diffcore;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod harness;
pub mod regularize;
pub mod rng;
pub mod value;

pub use error::{Error, Result};
