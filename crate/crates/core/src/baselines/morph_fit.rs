use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::de::{differential_evolution, DeConfig};
use super::kde::{kde_neg_loglik, median_bandwidth, scott_bandwidth};
use super::BaselineError;
use crate::geometry::{dilate, erode, BinaryCell, MorphScale};

/// Smallest and largest odd kernel sizes searched.
pub const SCALE_BOUNDS: (usize, usize) = (1, 101);

/// How the KDE bandwidth is chosen from the fabricated references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdeBandwidth {
    Scott,
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorphFitConfig {
    pub bounds: (usize, usize),
    pub bandwidth: KdeBandwidth,
    pub de: DeConfig,
}

impl Default for MorphFitConfig {
    fn default() -> Self {
        Self {
            bounds: SCALE_BOUNDS,
            bandwidth: KdeBandwidth::Scott,
            de: DeConfig {
                max_gen: 100,
                ..DeConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphFit {
    pub dilation: MorphScale,
    pub erosion: MorphScale,
    pub dilation_nll: f64,
    pub erosion_nll: f64,
    pub bandwidth: f64,
    /// Either search ended on the stall rule.
    pub stalled: bool,
}

fn fit_one(
    nominals: &[BinaryCell],
    fabs: &[BinaryCell],
    h: f64,
    cfg: &MorphFitConfig,
    op: fn(&BinaryCell, MorphScale) -> BinaryCell,
) -> (MorphScale, f64, bool) {
    let (lo, hi) = cfg.bounds;
    let memo: Mutex<BTreeMap<usize, f64>> = Mutex::new(BTreeMap::new());
    let score = |s: MorphScale| -> f64 {
        if let Some(v) = memo.lock().unwrap().get(&s.size()) {
            return *v;
        }
        let candidates: Vec<BinaryCell> = nominals.iter().map(|n| op(n, s)).collect();
        let v = kde_neg_loglik(&candidates, fabs, h);
        memo.lock().unwrap().insert(s.size(), v);
        v
    };
    let r = differential_evolution(
        |x| score(MorphScale::nearest_odd(x[0], lo, hi)),
        &[(lo as f64, hi as f64)],
        &cfg.de,
    );
    let scale = MorphScale::nearest_odd(r.x[0], lo, hi);
    (scale, r.value, r.stalled)
}

/// Maximum-likelihood dilation and erosion scales mapping `nominals` onto the
/// distribution of `fabs`, fitted independently.
pub fn fit_morph_scales(nominals: &[BinaryCell], fabs: &[BinaryCell], cfg: &MorphFitConfig) -> Result<MorphFit, BaselineError> {
    if nominals.is_empty() {
        return Err(BaselineError::EmptyInput("nominals"));
    }
    if fabs.is_empty() {
        return Err(BaselineError::EmptyInput("fabs"));
    }
    let first = &nominals[0];
    if !nominals.iter().chain(fabs).all(|c| c.same_shape(first)) {
        return Err(BaselineError::MixedResolution);
    }
    let (lo, hi) = cfg.bounds;
    if lo % 2 == 0 || hi % 2 == 0 || lo > hi {
        return Err(BaselineError::InvalidConfig(format!("scale bounds {:?} must be odd and ordered", cfg.bounds)));
    }
    let h = match cfg.bandwidth {
        KdeBandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        KdeBandwidth::Fixed(h) => return Err(BaselineError::InvalidConfig(format!("bandwidth {h}"))),
        KdeBandwidth::Scott => scott_bandwidth(fabs),
        KdeBandwidth::Median => median_bandwidth(fabs),
    };
    let (dilation, dilation_nll, s1) = fit_one(nominals, fabs, h, cfg, dilate);
    let (erosion, erosion_nll, s2) = fit_one(nominals, fabs, h, cfg, erode);
    Ok(MorphFit {
        dilation,
        erosion,
        dilation_nll,
        erosion_nll,
        bandwidth: h,
        stalled: s1 || s2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn nominals() -> Vec<BinaryCell> {
        let mut rng = rng_from_seed(5);
        (0..6)
            .map(|_| {
                let (r0, c0) = (rng.random_range(4..10), rng.random_range(4..10));
                let (hh, ww) = (rng.random_range(4..10), rng.random_range(4..10));
                BinaryCell::from_fn(24, 24, |r, c| (r0..r0 + hh).contains(&r) && (c0..c0 + ww).contains(&c)).unwrap()
            })
            .collect()
    }

    fn scan(nominals: &[BinaryCell], fabs: &[BinaryCell], h: f64, op: fn(&BinaryCell, MorphScale) -> BinaryCell) -> usize {
        (0..8)
            .map(|k| 2 * k + 1)
            .map(|s| {
                let c: Vec<BinaryCell> = nominals.iter().map(|n| op(n, MorphScale::new(s).unwrap())).collect();
                (s, kde_neg_loglik(&c, fabs, h))
            })
            .fold((0, f64::INFINITY), |acc, (s, v)| if v < acc.1 { (s, v) } else { acc })
            .0
    }

    #[test]
    fn identity_fabrication() {
        let n = nominals();
        let fit = fit_morph_scales(&n, &n, &MorphFitConfig::default()).unwrap();
        assert_eq!(fit.dilation.size(), 1);
        assert_eq!(fit.erosion.size(), 1);
    }

    #[test]
    fn recovers_dilation_like_scan() {
        let n = nominals();
        let fabs: Vec<BinaryCell> = n.iter().map(|c| dilate(c, MorphScale::new(3).unwrap())).collect();
        let cfg = MorphFitConfig { bounds: (1, 15), ..MorphFitConfig::default() };
        let fit = fit_morph_scales(&n, &fabs, &cfg).unwrap();
        assert_eq!(fit.dilation.size(), 3);
        assert_eq!(fit.dilation.size(), scan(&n, &fabs, fit.bandwidth, dilate));
        assert_eq!(fit.erosion.size(), scan(&n, &fabs, fit.bandwidth, erode));
    }

    #[test]
    fn rejects_bad_input() {
        let n = nominals();
        let other = vec![BinaryCell::filled(8, 8, true).unwrap()];
        assert_eq!(fit_morph_scales(&n, &other, &MorphFitConfig::default()), Err(BaselineError::MixedResolution));
        assert_eq!(fit_morph_scales(&[], &n, &MorphFitConfig::default()), Err(BaselineError::EmptyInput("nominals")));
    }
}
