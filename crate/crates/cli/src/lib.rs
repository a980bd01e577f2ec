//! Experiment runner and auxiliary commands of the `uqbench` tool.

pub mod config;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod metrics_cmd;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use runner::{run_experiment, Experiment, RunSummary};
