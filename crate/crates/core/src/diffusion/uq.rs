use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::sampler::sample;
use super::DiffusionError;
use crate::geometry::BinaryCell;

/// Default multiplier of the lower confidence bound, a one-sided 95% level.
pub const DEFAULT_KAPPA: f64 = 1.645;

/// A property with a fixed list of scalar components.
pub trait PropertyVector {
    fn components(&self) -> Vec<f64>;
}

impl PropertyVector for Vec<f64> {
    fn components(&self) -> Vec<f64> {
        self.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    pub q05: f64,
    pub q95: f64,
    /// `mean - kappa * std`.
    pub lcb: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summary statistics of one component; `values` must be non-empty.
pub fn component_stats(values: &[f64], kappa: f64) -> ComponentStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    ComponentStats {
        mean,
        std,
        q05: quantile(&sorted, 0.05),
        q95: quantile(&sorted, 0.95),
        lcb: mean - kappa * std,
    }
}

#[derive(Debug, Clone)]
pub struct UqResult<P> {
    pub geometries: Vec<BinaryCell>,
    /// Property of each geometry whose evaluation succeeded.
    pub samples: Vec<P>,
    pub stats: Vec<ComponentStats>,
    /// Geometries whose property evaluation failed.
    pub excluded: usize,
}

/// Summarizes property samples component by component.
pub fn summarize<P: PropertyVector>(samples: &[P], kappa: f64) -> Vec<ComponentStats> {
    let Some(first) = samples.first() else {
        return Vec::new();
    };
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.components()).collect();
    (0..first.components().len())
        .map(|c| component_stats(&rows.iter().map(|r| r[c]).collect::<Vec<_>>(), kappa))
        .collect()
}

/// Maps sampled geometries through `property_fn`, dropping failures.
pub fn propagate<P, E, F>(geometries: Vec<BinaryCell>, kappa: f64, property_fn: F) -> UqResult<P>
where
    P: PropertyVector + Send,
    E: std::fmt::Display + Send,
    F: Fn(&BinaryCell) -> Result<P, E> + Sync,
{
    let results: Vec<Result<P, E>> = geometries.par_iter().map(&property_fn).collect();
    let mut samples = Vec::with_capacity(results.len());
    let mut excluded = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => samples.push(p),
            Err(e) => {
                log::warn!("property evaluation failed for sample {i}: {e}");
                excluded += 1;
            }
        }
    }
    let stats = summarize(&samples, kappa);
    UqResult {
        geometries,
        samples,
        stats,
        excluded,
    }
}

/// Monte Carlo uncertainty of a property under the learned fabrication model.
pub fn mc_property_uq<P, E, F>(
    ckpt: &Checkpoint,
    x_nom: &BinaryCell,
    n: usize,
    seed: u64,
    kappa: f64,
    property_fn: F,
) -> Result<UqResult<P>, DiffusionError>
where
    P: PropertyVector + Send,
    E: std::fmt::Display + Send,
    F: Fn(&BinaryCell) -> Result<P, E> + Sync,
{
    if n < 2 {
        return Err(DiffusionError::InvalidConfig("need at least two Monte Carlo samples".into()));
    }
    let geometries = sample(ckpt, x_nom, n, seed)?;
    Ok(propagate(geometries, kappa, property_fn))
}
