//! Configuration system and subcommands of the `stillfast` binary.

pub mod commands;
pub mod config;

pub use commands::{CliError, CliResult};
pub use config::ExperimentConfig;
