//! Command-line surface over the segmentation pipeline: dataset synthesis,
//! training, prediction, evaluation, and the ablation experiments, with CSV
//! and SVG artifacts.

pub mod commands;
pub mod config;
pub mod data;
pub mod errors;
pub mod experiments;
pub mod pipeline;
pub mod svg;

pub use errors::{CliError, CliResult};
