use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::MetricsError;

/// Exact 1-D Wasserstein-1 distance between two empirical distributions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut x = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Silverman,
    Fixed(f64),
}

pub const KDE_GRID_POINTS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub densities: Vec<f64>,
    pub bandwidth: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `0.9 min(s, IQR / 1.34) n^(-1/5)`, falling back to the standard deviation
/// alone when the interquartile range vanishes.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let (_, var) = mean_var(samples);
    let sd = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (samples.len() as f64).powf(-0.2)
}

/// Gaussian kernel density estimate on [`KDE_GRID_POINTS`] points spanning
/// the data padded by three bandwidths. Zero-variance samples use the
/// bandwidth `1e-3 |mean| + 1e-9`.
pub fn kde_curve(samples: &[f64], bandwidth: Bandwidth) -> Result<KdeCurve, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFewPoints { have: samples.len(), need: 2 });
    }
    let (mean, var) = mean_var(samples);
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(MetricsError::InvalidConfig(format!("bandwidth {h}"))),
        Bandwidth::Silverman if var > 0.0 => silverman_bandwidth(samples),
        Bandwidth::Silverman => {
            log::warn!("zero-variance sample; using a fixed KDE bandwidth");
            1e-3 * mean.abs() + 1e-9
        }
    };
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| lo + i as f64 * step).collect();
    let densities = grid
        .iter()
        .map(|&x| norm * samples.iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Ok(KdeCurve {
        grid,
        densities,
        bandwidth: h,
    })
}

/// Two-sided Welch's t-test p-value.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::DegenerateVariance);
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if !(va > 0.0 && vb > 0.0) {
        return Err(MetricsError::DegenerateVariance);
    }
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| MetricsError::InvalidConfig(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal_vec};
    use proptest::prelude::*;

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein1(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((wasserstein1(&[0.0, 1.0], &[0.0, 0.0, 3.0]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(wasserstein1(&[], &[1.0]), Err(MetricsError::EmptySample));
    }

    proptest! {
        #[test]
        fn wasserstein_is_a_metric(
            a in prop::collection::vec(-10.0f64..10.0, 1..30),
            b in prop::collection::vec(-10.0f64..10.0, 1..30),
            c in prop::collection::vec(-10.0f64..10.0, 1..30),
        ) {
            let ab = wasserstein1(&a, &b).unwrap();
            prop_assert!((ab - wasserstein1(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(wasserstein1(&a, &a).unwrap().abs() < 1e-12);
            let ac = wasserstein1(&a, &c).unwrap();
            let cb = wasserstein1(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn wasserstein_equal_sizes_sorted_difference(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)) {
            let (mut a, mut b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let w = wasserstein1(&a, &b).unwrap();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let direct = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            prop_assert!((w - direct).abs() < 1e-12);
        }
    }

    fn trapezoid(c: &KdeCurve) -> f64 {
        c.grid.windows(2).zip(c.densities.windows(2)).map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1])).sum()
    }

    #[test]
    fn kde_normal_peak_and_mass() {
        let x = standard_normal_vec(&mut rng_from_seed(2), 100_000);
        let c = kde_curve(&x, Bandwidth::Silverman).unwrap();
        assert_eq!(c.grid.len(), KDE_GRID_POINTS);
        let peak = c.densities.iter().copied().fold(0.0, f64::max);
        let want = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((peak - want).abs() < 0.05 * want, "{peak}");
        assert!((trapezoid(&c) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn kde_two_points_symmetric() {
        let c = kde_curve(&[-1.0, 1.0], Bandwidth::Fixed(0.1)).unwrap();
        for i in 0..KDE_GRID_POINTS {
            assert!((c.densities[i] - c.densities[KDE_GRID_POINTS - 1 - i]).abs() < 1e-12);
        }
        let c = kde_curve(&[4.0, 4.0, 4.0], Bandwidth::Silverman).unwrap();
        assert!((c.bandwidth - (4e-3 + 1e-9)).abs() < 1e-15);
        assert!((trapezoid(&c) - 1.0).abs() < 3e-3);
    }

    #[test]
    fn welch() {
        let a = [1.0, 2.5, 3.0, 4.2];
        assert!((welch_p_value(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let x = standard_normal_vec(&mut rng_from_seed(0), 30);
        let y: Vec<f64> = standard_normal_vec(&mut rng_from_seed(1), 30).iter().map(|v| v + 5.0).collect();
        let p = welch_p_value(&x, &y).unwrap();
        assert!(p < 1e-10);
        assert_eq!(p, welch_p_value(&y, &x).unwrap());
        assert_eq!(welch_p_value(&[1.0, 1.0], &a), Err(MetricsError::DegenerateVariance));
    }

    #[test]
    fn welch_matches_reference_value() {
        // t = -1.5, both variances 1, n = 10 each: df = 18
        let a = [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 0.0, 0.0, 0.0];
        let (_, va) = mean_var(&a);
        let scale = va.sqrt().recip();
        let a: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let shift = 1.5 * (2.0f64 / 10.0).sqrt();
        let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let p = welch_p_value(&a, &b).unwrap();
        // two-sided tail of Student's t with 18 degrees of freedom at 1.5
        assert!((p - 0.150_950_452).abs() < 1e-8, "{p}");
    }
}
