//! Library side of the `normscape` binary: run configuration, exit-code
//! mapping and the command implementations.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{DataConfig, RunConfig};
pub use error::CliError;
