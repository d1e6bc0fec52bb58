//! Command-line driver for the federated rehabilitation-guidance pipeline.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, CliResult};
