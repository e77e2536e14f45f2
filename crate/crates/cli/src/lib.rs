//! Pipeline orchestration behind the `chronoscope` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod stages;

pub use config::{HeadConfig, PipelineConfig};
pub use error::{CliError, Result};
pub use pipeline::{ExperimentManifest, Pipeline, RunOptions, Stage};
