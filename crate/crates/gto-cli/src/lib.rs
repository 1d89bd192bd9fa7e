//! Std-side companion to `gto-core`: binary file formats, dataset
//! management, a threaded gradient executor and the `gto` command set.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod meshfield;

pub use error::{CliError, ExitCode};
