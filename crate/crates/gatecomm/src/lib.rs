//! Command line, configuration files, checkpoints and CSV/JSON outputs
//! around `gatecomm-core`.

pub mod baseline;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod output;

pub use error::{AppError, AppResult};
