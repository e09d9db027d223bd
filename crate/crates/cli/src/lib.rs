//! Experiment runner behind the `bdsde` binary.

pub mod commands;
pub mod config;

pub use commands::{run, Command, Outcome, RunError};
pub use config::ExperimentConfig;
