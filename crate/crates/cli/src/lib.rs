//! Command-line front end: configuration files, checkpoints, PGM/PPM
//! images, synthetic datasets, evaluation reports and the self-test.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pnm;
pub mod selftest;

pub use cli::{Cli, Command};
pub use commands::run;
pub use error::{CliError, Result};
