//! File formats, dataset trees, training runs and reports around
//! [`vsr_core`]. The `vsr` binary is a thin command line over this crate.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flowio;
pub mod imageio;
pub mod plot;
pub mod report;
pub mod train;

pub use error::{Category, Result, VsrError};

/// Environment variable naming the default root for run outputs.
pub const OUTPUT_ROOT_ENV: &str = "VSR_OUTPUT_ROOT";
