//! Distributional evaluation of generated geometries and properties.

mod embed;
mod neighbors;
mod stats;

pub use embed::{embed, embed_vectors, pca_embed, tsne_embed, EmbeddedSet, EmbeddingKind, MetricConfig, Source, TsneConfig};
pub use neighbors::{coverage, density, nnd_k};
pub use stats::{kde_curve, silverman_bandwidth, wasserstein1, welch_p_value, Bandwidth, KdeCurve, KDE_GRID_POINTS};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("perplexity {perplexity} too large for {points} points")]
    PerplexityTooLarge { perplexity: f64, points: usize },
    #[error("need more than k = {k} real points, have {have}")]
    TooFewRealPoints { have: usize, k: usize },
    #[error("need at least {need} points, have {have}")]
    TooFewPoints { have: usize, need: usize },
    #[error("sample variance must be positive and each sample needs 2 values")]
    DegenerateVariance,
    #[error("sample must not be empty")]
    EmptySample,
    #[error("points must share one dimension")]
    DimensionMismatch,
    #[error("invalid metric config: {0}")]
    InvalidConfig(String),
}
