//! Library side of the `dualcontrast` command: run configuration and the
//! operator commands.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
