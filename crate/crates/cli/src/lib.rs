//! Command-line front end: configuration merging and the `optimize`,
//! `evaluate`, `spectrum` and `info` subcommands.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 validation error.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_evaluate, cmd_info, cmd_optimize, cmd_spectrum};
pub use config::{EvaluateConfig, OptimizeConfig, SpectrumConfig};
pub use error::{CliError, CliResult};
