//! Experiment driver for the rooms benchmark: planning, learning,
//! Monte-Carlo verification of the analytic models and model dumps.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_learn, cmd_model, cmd_plan, cmd_verify};
pub use config::ExperimentConfig;
pub use error::CliError;
