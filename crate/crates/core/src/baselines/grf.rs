use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BaselineError;
use crate::geometry::{to_binary, to_sdf, BinaryCell, SdfGrid};
use crate::rng::standard_normal;

/// Squared-exponential Gaussian random field on the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfConfig {
    /// Correlation length along x, in unit-square coordinates.
    pub ell1: f64,
    /// Correlation length along y.
    pub ell2: f64,
    /// Field variance, in squared pixel units of the signed distance field.
    pub sigma2: f64,
    /// Number of retained Karhunen-Loeve modes.
    pub modes: usize,
    /// Lattice points per side.
    pub grid: usize,
}

impl Default for GrfConfig {
    fn default() -> Self {
        Self {
            ell1: 0.1,
            ell2: 0.1,
            sigma2: 1.5,
            modes: 64,
            grid: 32,
        }
    }
}

impl GrfConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let positive = [self.ell1, self.ell2, self.sigma2].iter().all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.grid < 2 || self.modes == 0 || self.modes > self.grid * self.grid {
            return Err(BaselineError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Lattice points `(x, y)` in row-major order, `y` varying slowest.
pub fn grid_points(grid: usize) -> Vec<(f64, f64)> {
    let step = 1.0 / (grid - 1) as f64;
    (0..grid)
        .flat_map(|r| (0..grid).map(move |c| (c as f64 * step, r as f64 * step)))
        .collect()
}

pub fn grf_covariance(cfg: &GrfConfig) -> DMatrix<f64> {
    let pts = grid_points(cfg.grid);
    let n = pts.len();
    DMatrix::from_fn(n, n, |i, j| {
        let dx = pts[i].0 - pts[j].0;
        let dy = pts[i].1 - pts[j].1;
        cfg.sigma2 * (-0.5 * (dx * dx / (cfg.ell1 * cfg.ell1) + dy * dy / (cfg.ell2 * cfg.ell2))).exp()
    })
}

/// Leading eigenpairs of a covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KlBasis {
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// One column per mode.
    pub eigenvectors: DMatrix<f64>,
}

const EIG_MAX_SWEEPS: usize = 10_000;

pub fn kl_decompose(c: &DMatrix<f64>, modes: usize) -> Result<KlBasis, BaselineError> {
    if modes == 0 || modes > c.nrows() || !c.is_square() {
        return Err(BaselineError::InvalidConfig(format!(
            "cannot keep {modes} modes of a {}x{} matrix",
            c.nrows(),
            c.ncols()
        )));
    }
    let eig = c
        .clone()
        .try_symmetric_eigen(f64::EPSILON, EIG_MAX_SWEEPS)
        .ok_or(BaselineError::EigFailure)?;
    let mut order: Vec<usize> = (0..c.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order.truncate(modes);
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let eigenvectors = DMatrix::from_fn(c.nrows(), modes, |i, m| eig.eigenvectors[(i, order[m])]);
    Ok(KlBasis {
        eigenvalues,
        eigenvectors,
    })
}

/// `g = sum_k sqrt(lambda_k) xi_k phi_k` for given coefficients.
pub fn grf_realize_with(basis: &KlBasis, xi: &[f64]) -> Vec<f64> {
    let w = DVector::from_iterator(
        basis.eigenvalues.len(),
        basis.eigenvalues.iter().zip(xi).map(|(l, x)| l.sqrt() * x),
    );
    (&basis.eigenvectors * w).iter().copied().collect()
}

pub fn grf_realize<R: Rng + ?Sized>(basis: &KlBasis, rng: &mut R) -> Vec<f64> {
    let xi: Vec<f64> = (0..basis.eigenvalues.len()).map(|_| standard_normal(rng)).collect();
    grf_realize_with(basis, &xi)
}

/// Adds a lattice field, bilinearly resampled to the cell grid, to the
/// signed distance field of `nominal` and thresholds at zero.
pub fn perturb_with_field(nominal: &BinaryCell, lattice: &SdfGrid) -> BinaryCell {
    let sdf = to_sdf(nominal);
    let (h, w) = (nominal.height(), nominal.width());
    let sx = (lattice.width() - 1) as f64 / (w - 1) as f64;
    let sy = (lattice.height() - 1) as f64 / (h - 1) as f64;
    let sum = SdfGrid::from_fn(h, w, |r, c| sdf.get(r, c) + lattice.sample(c as f64 * sx, r as f64 * sy));
    let out = to_binary(&sum, 0.0);
    if out.material_count() == 0 {
        log::warn!("GRF perturbation produced an all-void cell");
    }
    out
}

/// A GRF configuration with its eigenbasis computed once.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    pub cfg: GrfConfig,
    pub basis: KlBasis,
}

impl GrfSampler {
    pub fn new(cfg: GrfConfig) -> Result<Self, BaselineError> {
        cfg.validate()?;
        let basis = kl_decompose(&grf_covariance(&cfg), cfg.modes)?;
        Ok(Self { cfg, basis })
    }

    pub fn field<R: Rng + ?Sized>(&self, rng: &mut R) -> SdfGrid {
        let g = self.cfg.grid;
        SdfGrid::new(g, g, grf_realize(&self.basis, rng)).expect("finite field")
    }

    pub fn perturb<R: Rng + ?Sized>(&self, nominal: &BinaryCell, rng: &mut R) -> BinaryCell {
        perturb_with_field(nominal, &self.field(rng))
    }
}

pub fn grf_perturb<R: Rng + ?Sized>(nominal: &BinaryCell, cfg: &GrfConfig, rng: &mut R) -> Result<BinaryCell, BaselineError> {
    Ok(GrfSampler::new(*cfg)?.perturb(nominal, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn small() -> GrfConfig {
        GrfConfig {
            ell1: 0.3,
            ell2: 0.2,
            sigma2: 2.0,
            modes: 10,
            grid: 8,
        }
    }

    #[test]
    fn covariance_entries() {
        let cfg = GrfConfig { grid: 11, ..small() };
        let c = grf_covariance(&cfg);
        for i in 0..c.nrows() {
            assert_eq!(c[(i, i)], 2.0);
        }
        // points 3 lattice steps apart along x at spacing 0.1 are ell1 = 0.3 apart
        assert!((c[(0, 3)] - 2.0 * (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(c, c.transpose());
    }

    /// Cyclic Jacobi eigenvalue iteration.
    fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[(k, p)], a[(k, q)]);
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    #[test]
    fn eigenpairs_match_jacobi_oracle() {
        let cfg = GrfConfig { grid: 12, modes: 144, ..small() };
        let c = grf_covariance(&cfg);
        let basis = kl_decompose(&c, 144).unwrap();
        let oracle = jacobi_eigenvalues(c.clone());
        for (a, b) in basis.eigenvalues.iter().zip(&oracle) {
            assert!((a - b.max(0.0)).abs() < 1e-8, "{a} vs {b}");
        }
        for m in 0..20 {
            let v = basis.eigenvectors.column(m);
            let resid = (&c * v - v * basis.eigenvalues[m]).norm();
            assert!(resid < 1e-8);
            assert!((v.norm() - 1.0).abs() < 1e-8);
        }
        let gram = basis.eigenvectors.transpose() * &basis.eigenvectors;
        assert!((gram - DMatrix::identity(144, 144)).abs().max() < 1e-8);
    }

    #[test]
    fn trivial_spectra() {
        let b = kl_decompose(&DMatrix::identity(5, 5), 3).unwrap();
        assert_eq!(b.eigenvalues.len(), 3);
        for l in &b.eigenvalues {
            assert!((l - 1.0).abs() < 1e-12);
        }
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let b = kl_decompose(&(&v * v.transpose()), 4).unwrap();
        assert!((b.eigenvalues[0] - v.norm_squared()).abs() < 1e-12);
        assert!(b.eigenvalues[1..].iter().all(|l| l.abs() < 1e-12));
    }

    #[test]
    fn reconstruction_error_shrinks_with_modes() {
        let c = grf_covariance(&small());
        let mut last = f64::INFINITY;
        for m in [1, 4, 16, 40, 64] {
            let b = kl_decompose(&c, m).unwrap();
            let approx = &b.eigenvectors * DMatrix::from_diagonal(&DVector::from_vec(b.eigenvalues.clone())) * b.eigenvectors.transpose();
            let err = (&c - approx).norm();
            assert!(err <= last + 1e-10);
            last = err;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn realizations() {
        let b = kl_decompose(&grf_covariance(&small()), 10).unwrap();
        assert!(grf_realize_with(&b, &[0.0; 10]).iter().all(|v| *v == 0.0));
        let mut xi = vec![0.0; 10];
        xi[0] = 1.0;
        let g = grf_realize_with(&b, &xi);
        for (i, v) in g.iter().enumerate() {
            assert!((v - b.eigenvalues[0].sqrt() * b.eigenvectors[(i, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_limits() {
        let nominal = BinaryCell::from_fn(16, 16, |r, c| (4..12).contains(&r) && c > 3).unwrap();
        let tiny = GrfConfig { sigma2: 1e-12, ..small() };
        assert_eq!(grf_perturb(&nominal, &tiny, &mut rng_from_seed(0)).unwrap(), nominal);
        let flood = SdfGrid::from_fn(8, 8, |_, _| 100.0);
        assert_eq!(perturb_with_field(&nominal, &flood).material_count(), 256);
        let s = GrfSampler::new(small()).unwrap();
        assert_eq!(s.perturb(&nominal, &mut rng_from_seed(4)), s.perturb(&nominal, &mut rng_from_seed(4)));
    }

    #[test]
    fn changes_only_where_field_beats_sdf() {
        let nominal = BinaryCell::from_fn(16, 16, |r, c| (r + c) % 7 < 4).unwrap();
        let s = GrfSampler::new(small()).unwrap();
        let sdf = to_sdf(&nominal);
        for seed in 0..5 {
            let field = s.field(&mut rng_from_seed(seed));
            let out = perturb_with_field(&nominal, &field);
            let k = 7.0 / 15.0;
            for r in 0..16 {
                for c in 0..16 {
                    if out.get(r, c) != nominal.get(r, c) {
                        let g = field.sample(c as f64 * k, r as f64 * k);
                        assert!(g.abs() >= sdf.get(r, c).abs());
                    }
                }
            }
        }
    }
}
