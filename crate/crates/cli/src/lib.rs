//! Experiment runner: config parsing, data and model plumbing, and the
//! `rtta` subcommands.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{run, CliError, Command, Invocation};
pub use config::{parse_config, parse_config_with, ConfigError, ExperimentConfig};
