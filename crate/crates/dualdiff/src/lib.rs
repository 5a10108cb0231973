//! Command-line front end: TOML configs, CSV artifacts, checkpoints and the
//! scenario drivers built on `dualdiff-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod scenarios;

pub use error::{CliError, Result};
