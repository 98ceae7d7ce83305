//! Command-line shell around `hypermod`: run configs, image-folder
//! datasets, checkpoints, sample grids, plots and metric traces.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::RunConfig;
pub use error::{Result, ToolError};
