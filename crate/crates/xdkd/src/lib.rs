//! File formats, configuration and the command line around `xdkd-core`.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pfm;
pub mod pgm;
pub mod report;
pub mod xtd;

pub use error::{Error, Result};
