//! Command-line front end and annotation service for `mvgeo`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod error;
pub mod service;

pub use commands::{run, Cli};
pub use error::CliError;
