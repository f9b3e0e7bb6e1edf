//! Config-driven experiment runner for compatible representation learning:
//! data generation, training, feature extraction, evaluation and
//! compatibility reports.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{Experiment, ExperimentReport, Layout};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
