//! Experiment runner and command line for `moelab-core`. Everything that
//! touches files or the clock lives here.

pub mod characterize;
pub mod cli;
pub mod clock;
pub mod config;
pub mod container;
pub mod embeddings;
pub mod error;
pub mod export;
pub mod report;
pub mod train;

pub use error::{Error, Result};
