use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PerturbError;
use crate::geometry::{to_binary, to_sdf, BinaryCell, SdfGrid};
use crate::rng::standard_normal;

/// Free-form deformation settings: an `m×m` Bernstein control lattice spanning
/// the cell, with i.i.d. Gaussian control-point offsets of standard deviation
/// `sigma` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FfdConfig {
    pub m: usize,
    pub sigma: f64,
}

impl Default for FfdConfig {
    fn default() -> Self {
        Self { m: 4, sigma: 6.0 }
    }
}

impl FfdConfig {
    pub fn validate(&self) -> Result<(), PerturbError> {
        if self.m < 2 {
            return Err(PerturbError::InvalidConfig(format!(
                "FFD lattice needs m >= 2, got {}",
                self.m
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(PerturbError::InvalidConfig(format!(
                "FFD sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Draws the control-point offsets. Offsets are drawn for `i` (the `u`/x
    /// lattice axis) in the outer loop and `j` (the `v`/y axis) in the inner
    /// loop, x component before y.
    pub fn draw_offsets<R: Rng + ?Sized>(&self, rng: &mut R) -> ControlOffsets {
        let m = self.m;
        let offsets = (0..m * m)
            .map(|_| {
                let dx = self.sigma * standard_normal(rng);
                let dy = self.sigma * standard_normal(rng);
                [dx, dy]
            })
            .collect();
        ControlOffsets { m, offsets }
    }
}

/// Control-point displacements `xi[i][j]`, stored at `i * m + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOffsets {
    pub m: usize,
    pub offsets: Vec<[f64; 2]>,
}

impl ControlOffsets {
    pub fn constant(m: usize, d: [f64; 2]) -> Self {
        Self {
            m,
            offsets: vec![d; m * m],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 2] {
        self.offsets[i * self.m + j]
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Bernstein basis polynomial `B_i^n(t) = C(n, i) t^i (1 - t)^(n - i)`.
pub fn bernstein(n: usize, i: usize, t: f64) -> f64 {
    binomial(n, i) * t.powi(i as i32) * (1.0 - t).powi((n - i) as i32)
}

fn basis_table(m: usize, samples: usize) -> Vec<Vec<f64>> {
    (0..samples)
        .map(|k| {
            let t = if samples > 1 {
                k as f64 / (samples - 1) as f64
            } else {
                0.0
            };
            (0..m).map(|i| bernstein(m - 1, i, t)).collect()
        })
        .collect()
}

/// Displacement field `d(u, v) = sum_ij B_i(u) B_j(v) xi_ij` at every pixel,
/// with `u = col / (W - 1)` and `v = row / (H - 1)`. Returned row-major as
/// `(dx, dy)` pairs.
pub fn displacement_field(offsets: &ControlOffsets, height: usize, width: usize) -> Vec<[f64; 2]> {
    let m = offsets.m;
    let bu = basis_table(m, width);
    let bv = basis_table(m, height);
    let mut out = Vec::with_capacity(height * width);
    for row_basis in &bv {
        // inner[i] = sum_j B_j(v) xi_ij, shared along the row
        let inner: Vec<[f64; 2]> = (0..m)
            .map(|i| {
                let mut acc = [0.0; 2];
                for (j, &b) in row_basis.iter().enumerate() {
                    let xi = offsets.get(i, j);
                    acc[0] += b * xi[0];
                    acc[1] += b * xi[1];
                }
                acc
            })
            .collect();
        for col_basis in &bu {
            let mut d = [0.0; 2];
            for (i, &b) in col_basis.iter().enumerate() {
                d[0] += b * inner[i][0];
                d[1] += b * inner[i][1];
            }
            out.push(d);
        }
    }
    out
}

/// Backward-warps a field: output at `p` is the input sampled at `p - d(p)`.
pub fn warp_field(field: &SdfGrid, displacement: &[[f64; 2]]) -> SdfGrid {
    let (h, w) = (field.height(), field.width());
    SdfGrid::from_fn(h, w, |r, c| {
        let d = displacement[r * w + c];
        field.sample(c as f64 - d[0], r as f64 - d[1])
    })
}

/// Deforms a cell with explicit control offsets.
pub fn ffd_deform_with(cell: &BinaryCell, offsets: &ControlOffsets) -> BinaryCell {
    let (h, w) = (cell.height(), cell.width());
    let disp = displacement_field(offsets, h, w);
    to_binary(&warp_field(&to_sdf(cell), &disp), 0.0)
}

/// Randomly deforms a cell through a perturbed Bernstein control lattice.
pub fn ffd_deform<R: Rng + ?Sized>(
    cell: &BinaryCell,
    cfg: &FfdConfig,
    rng: &mut R,
) -> Result<BinaryCell, PerturbError> {
    cfg.validate()?;
    let offsets = cfg.draw_offsets(rng);
    Ok(ffd_deform_with(cell, &offsets))
}
