//! Desk-scale benchmark toolkit for epistemic uncertainty estimation.
//!
//! The crate bundles everything needed to compare approximate Bayesian
//! inference methods on small regression and classification problems:
//!
//! - [`nn`]: dense feed-forward networks with hand-written backpropagation.
//! - [`models`]: Gaussian and categorical output heads, MAP losses and the
//!   potential energy used by the MCMC samplers.
//! - [`optim`]: SGD, SGD with momentum and Adam.
//! - [`samplers`]: HMC, SGLD, SGHMC, ensembling and MC-dropout.
//! - [`predictive`]: aggregation of per-sample predictions.
//! - [`metrics`]: KL-to-reference, AUSE, AUCE, ECE, RMSE and friends.
//! - [`data`]: toy data generators and CSV fixture I/O.

pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod predictive;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
pub use nn::{Activation, DropoutSpec, ForwardMode, MlpArchitecture, ParamVector};
pub use rng::SeededRng;
