//! Pixel geometry of unit cells.
//!
//! A [`BinaryCell`] is the universal representation of a design: an `H×W`
//! row-major grid with `1` for material and `0` for void. Operators that act on
//! boundaries (free-form deformation, hole nucleation, random fields) work on
//! the [`SdfGrid`] of a cell, which is positive inside material and negative in
//! void, with distances measured between pixel centers.

mod edt;
mod morph;

pub use edt::{to_binary, to_sdf};
pub use morph::{dilate, erode};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible side length of a cell.
pub const MIN_SIDE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cell must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}")]
    TooSmall { height: usize, width: usize },
    #[error("expected {expected} values for the declared size, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("cell value at index {index} is {value}, expected 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("morphology kernel size must be odd and positive, got {0}")]
    InvalidScale(usize),
    #[error("grid values must be finite")]
    NonFinite,
}

/// A binary material/void image of a unit cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryCell {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryCell {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self, GeometryError> {
        check_size(height, width, values.len())?;
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(GeometryError::NotBinary { index, value });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Result<Self, GeometryError> {
        Self::new(height, width, vec![value as u8; height * width])
    }

    /// Builds a cell from a predicate over `(row, col)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, GeometryError> {
        check_size(height, width, height * width)?;
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c) as u8);
            }
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, material: bool) {
        self.values[row * self.width + col] = material as u8;
    }

    pub fn same_shape(&self, other: &BinaryCell) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn material_count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    /// Fraction of material pixels.
    pub fn volume_fraction(&self) -> f64 {
        self.material_count() as f64 / self.values.len() as f64
    }

    pub fn complement(&self) -> BinaryCell {
        BinaryCell {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Maps the cell to the symmetric signal range used by the diffusion model:
    /// material to `+1`, void to `-1`.
    pub fn to_signal(&self) -> Vec<f64> {
        self.values.iter().map(|&v| 2.0 * v as f64 - 1.0).collect()
    }

    /// Thresholds a signal at zero (strictly positive is material).
    pub fn from_signal(height: usize, width: usize, signal: &[f64]) -> Result<Self, GeometryError> {
        check_size(height, width, signal.len())?;
        Ok(Self {
            height,
            width,
            values: signal.iter().map(|&v| (v > 0.0) as u8).collect(),
        })
    }

    /// Number of pixels at which two equally sized cells differ.
    pub fn hamming(&self, other: &BinaryCell) -> usize {
        debug_assert!(self.same_shape(other));
        self.values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Intersection over union of the material sets. Two empty cells have IoU 1.
    pub fn iou(&self, other: &BinaryCell) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.values.iter().zip(&other.values) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Cyclic shift by `(dr, dc)` pixels.
    pub fn roll(&self, dr: usize, dc: usize) -> BinaryCell {
        let (h, w) = (self.height, self.width);
        let mut out = self.clone();
        for r in 0..h {
            for c in 0..w {
                out.values[((r + dr) % h) * w + (c + dc) % w] = self.values[r * w + c];
            }
        }
        out
    }

    /// Rotation by 90 degrees (counterclockwise on screen).
    pub fn rotate90(&self) -> BinaryCell {
        let (h, w) = (self.height, self.width);
        let mut values = vec![0u8; h * w];
        for r in 0..h {
            for c in 0..w {
                // new grid is w x h; (r, c) -> (w - 1 - c, r)
                values[(w - 1 - c) * h + r] = self.values[r * w + c];
            }
        }
        BinaryCell {
            height: w,
            width: h,
            values,
        }
    }

    pub fn mirror_horizontal(&self) -> BinaryCell {
        BinaryCell::from_fn(self.height, self.width, |r, c| {
            self.get(r, self.width - 1 - c)
        })
        .expect("same shape")
    }

    pub fn mirror_vertical(&self) -> BinaryCell {
        BinaryCell::from_fn(self.height, self.width, |r, c| {
            self.get(self.height - 1 - r, c)
        })
        .expect("same shape")
    }
}

fn check_size(height: usize, width: usize, len: usize) -> Result<(), GeometryError> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(GeometryError::TooSmall { height, width });
    }
    if len != height * width {
        return Err(GeometryError::SizeMismatch {
            expected: height * width,
            actual: len,
        });
    }
    Ok(())
}

/// Fraction of material pixels of a cell.
pub fn volume_fraction(cell: &BinaryCell) -> f64 {
    cell.volume_fraction()
}

/// A real-valued field over the pixel centers of a cell, in pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SdfGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, GeometryError> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(GeometryError::SizeMismatch {
                expected: height * width,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Bilinear sample at `(x, y) = (col, row)` in pixel-center coordinates.
    /// Coordinates outside the grid are clamped to the border (edge
    /// replication).
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = lerp(self.get(y0, x0), self.get(y0, x1), fx);
        let bottom = lerp(self.get(y1, x0), self.get(y1, x1), fx);
        lerp(top, bottom, fy)
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a * (1.0 - t) + b * t
    }
}

/// Bilinear interpolation of `field` at each `(x, y) = (col, row)` point.
pub fn resample_bilinear(field: &SdfGrid, sample_points: &[(f64, f64)]) -> Vec<f64> {
    sample_points
        .iter()
        .map(|&(x, y)| field.sample(x, y))
        .collect()
}

/// Side length of a square morphology kernel (odd, anchored at its center).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct MorphScale(usize);

impl MorphScale {
    pub const IDENTITY: MorphScale = MorphScale(1);

    pub fn new(size: usize) -> Result<Self, GeometryError> {
        if size == 0 || size % 2 == 0 {
            return Err(GeometryError::InvalidScale(size));
        }
        Ok(Self(size))
    }

    /// Nearest odd scale to a continuous value, clamped to `[lo, hi]` (both odd).
    pub fn nearest_odd(value: f64, lo: usize, hi: usize) -> Self {
        let k = ((value - 1.0) / 2.0).round();
        let size = if k.is_finite() && k > 0.0 {
            2 * (k as usize) + 1
        } else {
            1
        };
        Self(size.clamp(lo, hi))
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn radius(self) -> usize {
        self.0 / 2
    }
}

impl TryFrom<usize> for MorphScale {
    type Error = GeometryError;

    fn try_from(size: usize) -> Result<Self, Self::Error> {
        Self::new(size)
    }
}

impl From<MorphScale> for usize {
    fn from(s: MorphScale) -> usize {
        s.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_cells() {
        assert!(matches!(
            BinaryCell::new(3, 8, vec![0; 24]),
            Err(GeometryError::TooSmall { .. })
        ));
        assert!(matches!(
            BinaryCell::new(4, 4, vec![0; 15]),
            Err(GeometryError::SizeMismatch { .. })
        ));
        assert!(matches!(
            BinaryCell::new(4, 4, vec![2; 16]),
            Err(GeometryError::NotBinary { .. })
        ));
    }

    #[test]
    fn volume_fraction_counts() {
        assert_eq!(BinaryCell::filled(8, 8, true).unwrap().volume_fraction(), 1.0);
        assert_eq!(BinaryCell::filled(8, 8, false).unwrap().volume_fraction(), 0.0);
        let half = BinaryCell::from_fn(64, 64, |r, _| r < 32).unwrap();
        assert_eq!(volume_fraction(&half), 0.5);
    }

    #[test]
    fn bilinear_nodes_midpoints_and_clamping() {
        let f = SdfGrid::from_fn(4, 5, |r, c| (r * 10 + c) as f64 * 0.37 - 2.0);
        assert_eq!(f.sample(2.0, 1.0), f.get(1, 2));
        assert_eq!(f.sample(2.5, 1.0), 0.5 * (f.get(1, 2) + f.get(1, 3)));
        assert_eq!(f.sample(-5.0, -5.0), f.get(0, 0));
        assert_eq!(f.sample(100.0, 100.0), f.get(3, 4));
        let pts = resample_bilinear(&f, &[(0.0, 0.0), (4.0, 3.0)]);
        assert_eq!(pts, vec![f.get(0, 0), f.get(3, 4)]);
    }

    #[test]
    fn morph_scale_rules() {
        assert!(MorphScale::new(0).is_err());
        assert!(MorphScale::new(4).is_err());
        assert_eq!(MorphScale::new(5).unwrap().radius(), 2);
        assert_eq!(MorphScale::nearest_odd(2.9, 1, 101).size(), 3);
        assert_eq!(MorphScale::nearest_odd(1.9, 1, 101).size(), 1);
        assert_eq!(MorphScale::nearest_odd(-3.0, 1, 101).size(), 1);
        assert_eq!(MorphScale::nearest_odd(500.0, 1, 101).size(), 101);
    }

    #[test]
    fn rotation_and_roll() {
        let c = BinaryCell::from_fn(4, 6, |r, c| r == 0 && c == 5).unwrap();
        let rot = c.rotate90();
        assert_eq!((rot.height(), rot.width()), (6, 4));
        assert!(rot.get(0, 0));
        let rolled = c.roll(1, 1);
        assert!(rolled.get(1, 0));
        assert_eq!(c.rotate90().rotate90().rotate90().rotate90(), c);
    }
}
