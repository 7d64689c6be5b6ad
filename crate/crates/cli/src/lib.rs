//! Experiment driver: config schema, the seven experiment commands, report
//! rendering and the acceptance suite.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use error::CliError;
