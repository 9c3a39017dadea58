//! Config-driven pipeline over `flowlab-core`: dataset generation, flow
//! training, classifier training, prediction, subgroup evaluation, summary
//! tables and figures, with a digest-checked manifest per run.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod figures;
pub mod manifest;
pub mod pipeline;

pub use config::{DataGenConfig, DataSource, ExperimentConfig, FlowSource, FlowStageConfig, RunSpec};
pub use error::{CliError, CliResult};
pub use figures::{emit_figures, ReportEntry};
pub use manifest::ExperimentManifest;
pub use pipeline::run_experiment;
