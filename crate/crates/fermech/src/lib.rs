//! File formats, run configuration and command implementations for the
//! `fermech` command-line tool. The algorithms live in `fermech-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use config::{RawConfig, RunConfig};
pub use error::{CliError, Result};
