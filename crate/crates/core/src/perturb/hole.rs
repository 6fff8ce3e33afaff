use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PerturbError;
use crate::geometry::SdfGrid;
use crate::rng::standard_normal;

/// How the bump amplitude is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Amplitude {
    /// A fixed amplitude in field (pixel) units.
    Absolute(f64),
    /// A multiple of the largest value of the field being perturbed.
    MaxSdfMultiple(f64),
}

/// Settings of the random hole-nucleation operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoleConfig {
    pub alpha: Amplitude,
    /// Mean of the normal draw whose square gives each diagonal covariance entry.
    pub cov_mean: f64,
    pub cov_std: f64,
    /// Bound on `|S12| / sqrt(S11 S22)`, in `[0, 1)`.
    pub offdiag_fraction_max: f64,
}

impl Default for HoleConfig {
    fn default() -> Self {
        Self {
            alpha: Amplitude::MaxSdfMultiple(1.5),
            cov_mean: 3.0,
            cov_std: 1.0,
            offdiag_fraction_max: 0.8,
        }
    }
}

impl HoleConfig {
    pub fn validate(&self) -> Result<(), PerturbError> {
        let alpha_ok = match self.alpha {
            Amplitude::Absolute(a) | Amplitude::MaxSdfMultiple(a) => a > 0.0 && a.is_finite(),
        };
        if !alpha_ok {
            return Err(PerturbError::InvalidConfig("hole amplitude must be > 0".into()));
        }
        if !(self.cov_std >= 0.0) || !self.cov_mean.is_finite() {
            return Err(PerturbError::InvalidConfig(
                "hole covariance draw needs finite mean and std >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.offdiag_fraction_max) {
            return Err(PerturbError::InvalidConfig(
                "offdiag_fraction_max must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// A symmetric 2x2 covariance `[[s11, s12], [s12, s22]]` in pixel^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov2 {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

impl Cov2 {
    pub fn det(&self) -> f64 {
        self.s11 * self.s22 - self.s12 * self.s12
    }

    /// `d^T S^-1 d` for `d = (dx, dy)`.
    pub fn mahalanobis_sq(&self, dx: f64, dy: f64) -> f64 {
        (self.s22 * dx * dx - 2.0 * self.s12 * dx * dy + self.s11 * dy * dy) / self.det()
    }
}

/// Concrete parameters of one Gaussian bump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoleParams {
    /// `(x, y) = (col, row)` of the bump center.
    pub center: (f64, f64),
    pub cov: Cov2,
    pub amplitude: f64,
}

const MAX_COV_ATTEMPTS: usize = 100;
const MIN_DIAGONAL: f64 = 1e-6;

/// Samples a positive-definite covariance: squared normal diagonal entries and
/// an off-diagonal uniformly inside `±f sqrt(S11 S22)`.
pub fn sample_covariance<R: Rng + ?Sized>(cfg: &HoleConfig, rng: &mut R) -> Result<Cov2, PerturbError> {
    for _ in 0..MAX_COV_ATTEMPTS {
        let xi = cfg.cov_mean + cfg.cov_std * standard_normal(rng);
        let xj = cfg.cov_mean + cfg.cov_std * standard_normal(rng);
        let (s11, s22) = (xi * xi, xj * xj);
        let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
        if s11 < MIN_DIAGONAL || s22 < MIN_DIAGONAL {
            continue;
        }
        let s12 = u * cfg.offdiag_fraction_max * (s11 * s22).sqrt();
        return Ok(Cov2 { s11, s12, s22 });
    }
    Err(PerturbError::DegenerateCovariance)
}

/// Subtracts a Gaussian bump: `x(p) - a exp(-(p - mu)^T S^-1 (p - mu) / 2)`.
pub fn apply_hole(sdf: &SdfGrid, params: &HoleParams) -> SdfGrid {
    let (mx, my) = params.center;
    SdfGrid::from_fn(sdf.height(), sdf.width(), |r, c| {
        let q = params.cov.mahalanobis_sq(c as f64 - mx, r as f64 - my);
        sdf.get(r, c) - params.amplitude * (-0.5 * q).exp()
    })
}

/// Draws a bump center among interior material pixels (field value above one
/// pixel; any material pixel if none qualifies), a covariance and an amplitude.
pub fn sample_hole<R: Rng + ?Sized>(
    sdf: &SdfGrid,
    cfg: &HoleConfig,
    rng: &mut R,
) -> Result<HoleParams, PerturbError> {
    cfg.validate()?;
    let pick = |min: f64| -> Vec<usize> {
        sdf.values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > min)
            .map(|(i, _)| i)
            .collect()
    };
    let mut candidates = pick(1.0);
    if candidates.is_empty() {
        candidates = pick(0.0);
    }
    if candidates.is_empty() {
        return Err(PerturbError::NoInteriorMaterial);
    }
    let idx = candidates[rng.random_range(0..candidates.len())];
    let center = ((idx % sdf.width()) as f64, (idx / sdf.width()) as f64);
    let cov = sample_covariance(cfg, rng)?;
    let amplitude = match cfg.alpha {
        Amplitude::Absolute(a) => a,
        Amplitude::MaxSdfMultiple(k) => k * sdf.max_value(),
    };
    Ok(HoleParams {
        center,
        cov,
        amplitude,
    })
}

/// Carves one random elliptical void into a signed distance field.
pub fn nucleate_hole<R: Rng + ?Sized>(
    sdf: &SdfGrid,
    cfg: &HoleConfig,
    rng: &mut R,
) -> Result<SdfGrid, PerturbError> {
    let params = sample_hole(sdf, cfg, rng)?;
    Ok(apply_hole(sdf, &params))
}
