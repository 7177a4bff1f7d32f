//! Command-line driver for the transfer lab: run configuration, artifacts
//! and the `train`, `attack` and `suite` commands.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::execute;
pub use config::RunConfig;
pub use error::{CliError, Result};
