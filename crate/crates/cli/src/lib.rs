//! Command implementations behind the `popinterp` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod output;

pub use error::{CliError, Result};
