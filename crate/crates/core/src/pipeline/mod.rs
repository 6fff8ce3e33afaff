//! Staged experiment driver: configuration profiles, nominal design
//! generation, dataset and image I/O, the run manifest and report emission.

mod config;
mod io;
mod manifest;
mod nominals;
mod report;
mod stages;

pub use config::{BaselineConfig, DataConfig, EvalConfig, ExperimentConfig, Profile};
pub use io::{
    export_png, import_cells, import_image, load_dataset, read_dataset, read_property_csv, save_dataset, write_dataset,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use manifest::{RunManifest, Stage, StageRecord, MANIFEST_FILE};
pub use nominals::{gen_nominals, is_connected, is_orthotropic, is_valid_nominal, Family, VF_RANGE};
pub use report::{emit_report, kde_svg, SummaryRow};
pub use stages::{read_raw_metrics, run_all, run_stage, MetricRecord, METHODS};

use thiserror::Error;

use crate::baselines::BaselineError;
use crate::diffusion::DiffusionError;
use crate::homogenize::HomogenizeError;
use crate::metrics::MetricsError;
use crate::perturb::PerturbError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("output directory was produced by config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("stage {stage} needs {missing} to complete first")]
    MissingDependency { stage: Stage, missing: Stage },
    #[error("design {index}: no valid candidate after {attempts} attempts")]
    GenerationExhausted { index: usize, attempts: usize },
    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: String, reason: String },
    #[error("image {path} binarizes to all {kind}")]
    EmptyCell { path: String, kind: &'static str },
    #[error("bad file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Homogenize(#[from] HomogenizeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    /// Process exit code: 2 for configuration problems, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::ConfigMismatch { .. } => 2,
            _ => 3,
        }
    }
}
