//! Comparison methods: Gaussian random field perturbation of the signed
//! distance field, maximum-likelihood morphology fits, and dataset
//! augmentation for direct training.

mod de;
mod grf;
mod kde;
mod morph_fit;

pub use de::{differential_evolution, DeConfig, DeResult};
pub use grf::{
    grf_covariance, grf_perturb, grf_realize, grf_realize_with, grid_points, kl_decompose,
    perturb_with_field, GrfConfig, GrfSampler, KlBasis,
};
pub use kde::{kde_neg_loglik, median_bandwidth, scott_bandwidth};
pub use morph_fit::{fit_morph_scales, KdeBandwidth, MorphFit, MorphFitConfig, SCALE_BOUNDS};

pub use crate::perturb::augment_dataset;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("invalid baseline config: {0}")]
    InvalidConfig(String),
    #[error("eigendecomposition did not converge")]
    EigFailure,
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("cells must share one resolution")]
    MixedResolution,
}
