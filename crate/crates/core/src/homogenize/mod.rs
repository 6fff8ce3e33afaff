//! Periodic finite-element homogenization of pixelated unit cells.
//!
//! Each pixel is a unit bilinear quadrilateral in plane stress. Void pixels
//! keep a tiny fraction of the solid stiffness so the system stays
//! nonsingular. The effective tensor is the mutual strain energy of the three
//! unit macroscopic strain cases.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::PropertyVector;
use crate::geometry::BinaryCell;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomogenizeError {
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
    #[error("void ratio must lie in (0, 1), got {0}")]
    InvalidVoidRatio(f64),
    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    SolveDiverged { iterations: usize, residual: f64 },
    #[error("cells in a property table must share one resolution")]
    MixedResolution,
    #[error("csv output failed: {0}")]
    Csv(String),
}

/// Isotropic linear elastic constituent in plane stress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub e: f64,
    pub nu: f64,
}

impl Default for Material {
    fn default() -> Self {
        Self { e: 1.0, nu: 0.3 }
    }
}

impl Material {
    pub fn new(e: f64, nu: f64) -> Result<Self, HomogenizeError> {
        let m = Self { e, nu };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), HomogenizeError> {
        if !(self.e > 0.0 && self.e.is_finite()) {
            return Err(HomogenizeError::InvalidMaterial(format!("E = {} must be > 0", self.e)));
        }
        if !(self.nu > -1.0 && self.nu < 0.5) {
            return Err(HomogenizeError::InvalidMaterial(format!("nu = {} outside (-1, 0.5)", self.nu)));
        }
        Ok(())
    }

    /// Plane-stress constitutive matrix in Voigt order (11, 22, 12) with
    /// engineering shear strain.
    pub fn plane_stress(&self) -> ElasticTensor {
        let f = self.e / (1.0 - self.nu * self.nu);
        ElasticTensor {
            c: [
                [f, f * self.nu, 0.0],
                [f * self.nu, f, 0.0],
                [0.0, 0.0, f * (1.0 - self.nu) / 2.0],
            ],
        }
    }
}

/// Symmetric 3x3 stiffness in Voigt order (11, 22, 12).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticTensor {
    pub c: [[f64; 3]; 3],
}

impl ElasticTensor {
    pub fn c11(&self) -> f64 {
        self.c[0][0]
    }

    pub fn c12(&self) -> f64 {
        self.c[0][1]
    }

    pub fn c22(&self) -> f64 {
        self.c[1][1]
    }

    /// Shear entry.
    pub fn c33(&self) -> f64 {
        self.c[2][2]
    }

    /// `[C11, C12, C22, C33]`.
    pub fn components(&self) -> [f64; 4] {
        [self.c11(), self.c12(), self.c22(), self.c33()]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut c = self.c;
        for row in &mut c {
            for v in row {
                *v *= s;
            }
        }
        Self { c }
    }
}

pub const COMPONENT_NAMES: [&str; 4] = ["C11", "C12", "C22", "C33"];

impl PropertyVector for ElasticTensor {
    fn components(&self) -> Vec<f64> {
        ElasticTensor::components(self).to_vec()
    }
}

/// Analytic stiffness of a unit square bilinear element. Nodes are ordered
/// `(0,0), (1,0), (1,1), (0,1)` with dofs `(u_x, u_y)` per node.
pub fn element_stiffness(mat: &Material) -> [[f64; 8]; 8] {
    let nu = mat.nu;
    let k = [
        0.5 - nu / 6.0,
        0.125 + nu / 8.0,
        -0.25 - nu / 12.0,
        -0.125 + 3.0 * nu / 8.0,
        -0.25 + nu / 12.0,
        -0.125 - nu / 8.0,
        nu / 6.0,
        0.125 - 3.0 * nu / 8.0,
    ];
    const IDX: [[usize; 8]; 8] = [
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ];
    let f = mat.e / (1.0 - nu * nu);
    let mut ke = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            ke[i][j] = f * k[IDX[i][j]];
        }
    }
    ke
}

/// Nodal displacements of a unit element under each unit macroscopic strain.
const UNIT_STRAIN_DISPLACEMENTS: [[f64; 8]; 3] = [
    // u = (x, 0)
    [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    // u = (0, y)
    [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0],
    // u = (y / 2, x / 2)
    [0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.0],
];

const CG_TOLERANCE: f64 = 1e-12;

struct PeriodicMesh {
    dofs: Vec<[usize; 8]>,
    scale: Vec<f64>,
    ke: [[f64; 8]; 8],
    ndof: usize,
}

impl PeriodicMesh {
    fn new(cell: &BinaryCell, ke: [[f64; 8]; 8], void_ratio: f64) -> Self {
        let (h, w) = (cell.height(), cell.width());
        let node = |r: usize, c: usize| (r % h) * w + (c % w);
        let mut dofs = Vec::with_capacity(h * w);
        let mut scale = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                // local (x, y) = (col, row)
                let nodes = [node(r, c), node(r, c + 1), node(r + 1, c + 1), node(r + 1, c)];
                let mut d = [0usize; 8];
                for (k, n) in nodes.iter().enumerate() {
                    d[2 * k] = 2 * n;
                    d[2 * k + 1] = 2 * n + 1;
                }
                dofs.push(d);
                scale.push(if cell.get(r, c) { 1.0 } else { void_ratio });
            }
        }
        Self {
            dofs,
            scale,
            ke,
            ndof: 2 * h * w,
        }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for (d, &s) in self.dofs.iter().zip(&self.scale) {
            let xe: [f64; 8] = std::array::from_fn(|k| x[d[k]]);
            for i in 0..8 {
                let mut acc = 0.0;
                for j in 0..8 {
                    acc += self.ke[i][j] * xe[j];
                }
                y[d[i]] += s * acc;
            }
        }
        // node 0 is pinned
        y[0] = 0.0;
        y[1] = 0.0;
    }

    fn diagonal(&self) -> Vec<f64> {
        let mut diag = vec![0.0; self.ndof];
        for (d, &s) in self.dofs.iter().zip(&self.scale) {
            for i in 0..8 {
                diag[d[i]] += s * self.ke[i][i];
            }
        }
        diag
    }

    /// Assembled load `-K u0` for a unit strain case, plus the norm of the
    /// unassembled element loads as a scale for the residual floor.
    fn load(&self, case: usize) -> (Vec<f64>, f64) {
        let u0 = &UNIT_STRAIN_DISPLACEMENTS[case];
        let fe: [f64; 8] = std::array::from_fn(|i| -(0..8).map(|j| self.ke[i][j] * u0[j]).sum::<f64>());
        let mut b = vec![0.0; self.ndof];
        let mut scale = 0.0;
        for (d, &s) in self.dofs.iter().zip(&self.scale) {
            for i in 0..8 {
                b[d[i]] += s * fe[i];
                scale += (s * fe[i]).powi(2);
            }
        }
        b[0] = 0.0;
        b[1] = 0.0;
        (b, scale.sqrt())
    }

    fn solve(&self, b: &[f64], load_scale: f64, diag: &[f64]) -> Result<Vec<f64>, HomogenizeError> {
        let n = self.ndof;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let b_norm = dot(b, b).sqrt();
        let mut x = vec![0.0; n];
        // loads that cancel to rounding error need no fluctuation
        if b_norm <= 1e-13 * load_scale {
            return Ok(x);
        }
        let inv: Vec<f64> = diag.iter().map(|d| if *d > 0.0 { 1.0 / d } else { 0.0 }).collect();
        let precondition = |r: &[f64]| -> Vec<f64> {
            let mut z: Vec<f64> = r.iter().zip(&inv).map(|(r, i)| r * i).collect();
            z[0] = 0.0;
            z[1] = 0.0;
            z
        };
        let mut r = b.to_vec();
        let mut z = precondition(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        // measured in the Jacobi-scaled norm so soft void pixels converge too
        let stop = CG_TOLERANCE * CG_TOLERANCE * rz;
        let mut ap = vec![0.0; n];
        let cap = 20 * n;
        for _ in 0..cap {
            self.apply(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            z = precondition(&r);
            let rz_new = dot(&r, &z);
            if rz_new <= stop {
                return Ok(x);
            }
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
        }
        Err(HomogenizeError::SolveDiverged {
            iterations: cap,
            residual: dot(&r, &r).sqrt() / b_norm,
        })
    }
}

/// Effective plane-stress tensor of a periodic cell.
pub fn homogenize(cell: &BinaryCell, solid: &Material, void_ratio: f64) -> Result<ElasticTensor, HomogenizeError> {
    solid.validate()?;
    if !(void_ratio > 0.0 && void_ratio < 1.0) {
        return Err(HomogenizeError::InvalidVoidRatio(void_ratio));
    }
    if cell.material_count() == 0 {
        log::warn!("homogenizing an all-void cell; returning the ersatz material tensor");
        return Ok(solid.plane_stress().scaled(void_ratio));
    }
    let mesh = PeriodicMesh::new(cell, element_stiffness(solid), void_ratio);
    let diag = mesh.diagonal();
    let mut fluct = Vec::with_capacity(3);
    for case in 0..3 {
        let (b, scale) = mesh.load(case);
        fluct.push(mesh.solve(&b, scale, &diag)?);
    }
    let area = cell.len() as f64;
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let mut energy = 0.0;
            for (d, &s) in mesh.dofs.iter().zip(&mesh.scale) {
                let ui: [f64; 8] = std::array::from_fn(|k| UNIT_STRAIN_DISPLACEMENTS[i][k] + fluct[i][d[k]]);
                let uj: [f64; 8] = std::array::from_fn(|k| UNIT_STRAIN_DISPLACEMENTS[j][k] + fluct[j][d[k]]);
                let mut e = 0.0;
                for a in 0..8 {
                    for b in 0..8 {
                        e += ui[a] * mesh.ke[a][b] * uj[b];
                    }
                }
                energy += s * e;
            }
            c[i][j] = energy / area;
            c[j][i] = c[i][j];
        }
    }
    Ok(ElasticTensor { c })
}

/// Default ersatz stiffness ratio of void pixels.
pub const DEFAULT_VOID_RATIO: f64 = 1e-9;

/// One row of a property table; failed cells carry an error and no tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyRow {
    pub id: String,
    pub tensor: Option<ElasticTensor>,
    pub volume_fraction: f64,
    pub error: Option<String>,
}

/// Homogenizes every cell, in input order.
pub fn property_table(
    cells: &[(String, BinaryCell)],
    solid: &Material,
    void_ratio: f64,
) -> Result<Vec<PropertyRow>, HomogenizeError> {
    if let Some((_, first)) = cells.first() {
        if cells.iter().any(|(_, c)| !c.same_shape(first)) {
            return Err(HomogenizeError::MixedResolution);
        }
    }
    Ok(cells
        .par_iter()
        .map(|(id, cell)| {
            let (tensor, error) = match homogenize(cell, solid, void_ratio) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            PropertyRow {
                id: id.clone(),
                tensor,
                volume_fraction: cell.volume_fraction(),
                error,
            }
        })
        .collect())
}

/// Decimal rendering with nine significant digits.
pub fn format_sig9(v: f64) -> String {
    if !v.is_finite() {
        return "NaN".into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // rounding can carry into a new leading digit
    let digits = s.chars().filter(|c| c.is_ascii_digit()).collect::<String>();
    if digits.trim_start_matches('0').len() > 9 && decimals > 0 {
        format!("{v:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

/// Writes `id,C11,C12,C22,C33,vf`; failed rows hold `NaN` components.
pub fn write_property_csv<W: Write>(rows: &[PropertyRow], out: W) -> Result<(), HomogenizeError> {
    let csv_err = |e: csv::Error| HomogenizeError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "C11", "C12", "C22", "C33", "vf"]).map_err(csv_err)?;
    for row in rows {
        let comps = row.tensor.map(|t| t.components()).unwrap_or([f64::NAN; 4]);
        let mut rec = vec![row.id.clone()];
        rec.extend(comps.iter().map(|&v| format_sig9(v)));
        rec.push(format_sig9(row.volume_fraction));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HomogenizeError::Csv(e.to_string()))?;
    Ok(())
}

pub fn save_property_csv(rows: &[PropertyRow], path: &Path) -> Result<(), HomogenizeError> {
    let file = std::fs::File::create(path).map_err(|e| HomogenizeError::Csv(e.to_string()))?;
    write_property_csv(rows, std::io::BufWriter::new(file))
}
