//! Library side of the `dp3d` command-line tool: run configuration and the
//! subcommands.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
