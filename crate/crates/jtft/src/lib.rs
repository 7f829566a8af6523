//! Data loading, training, checkpoints, benchmarks and the command-line
//! tools for the JTFT forecaster in `jtft-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod synthetic;
pub mod train;

pub use error::{AppError, AppResult};
