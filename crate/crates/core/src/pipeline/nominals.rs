use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::geometry::BinaryCell;
use crate::rng::{standard_normal, stream};

/// Procedural families of orthotropic nominal designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Bars,
    Crosses,
    RingSlots,
    RandomSymmetricLevelset,
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bars" => Ok(Family::Bars),
            "crosses" => Ok(Family::Crosses),
            "ring-slots" => Ok(Family::RingSlots),
            "random-symmetric-levelset" => Ok(Family::RandomSymmetricLevelset),
            other => Err(format!("unknown nominal family `{other}`")),
        }
    }
}

pub const VF_RANGE: (f64, f64) = (0.25, 0.75);
const MAX_ATTEMPTS: usize = 100;

/// Signed offsets of the pixel centres from the cell centre in units of the
/// cell width, computed on the folded index so mirror images agree bit-exact.
fn folded(i: usize, n: usize) -> f64 {
    let f = i.min(n - 1 - i);
    0.5 - (f as f64 + 0.5) / n as f64
}

/// Material is 4-connected and non-empty.
pub fn is_connected(cell: &BinaryCell) -> bool {
    let (h, w) = (cell.height(), cell.width());
    let Some(start) = cell.values().iter().position(|&v| v == 1) else {
        return false;
    };
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut count = 0;
    while let Some(p) = queue.pop_front() {
        count += 1;
        let (r, c) = (p / w, p % w);
        let mut visit = |q: usize| {
            if !seen[q] && cell.values()[q] == 1 {
                seen[q] = true;
                queue.push_back(q);
            }
        };
        if r > 0 {
            visit(p - w);
        }
        if r + 1 < h {
            visit(p + w);
        }
        if c > 0 {
            visit(p - 1);
        }
        if c + 1 < w {
            visit(p + 1);
        }
    }
    count == cell.material_count()
}

pub fn is_orthotropic(cell: &BinaryCell) -> bool {
    *cell == cell.mirror_horizontal() && *cell == cell.mirror_vertical()
}

/// Accepts designs that are mirror-symmetric, connected and inside [`VF_RANGE`].
pub fn is_valid_nominal(cell: &BinaryCell) -> bool {
    let vf = cell.volume_fraction();
    (VF_RANGE.0..=VF_RANGE.1).contains(&vf) && is_orthotropic(cell) && is_connected(cell)
}

fn candidate<R: Rng + ?Sized>(family: Family, n: usize, rng: &mut R) -> BinaryCell {
    let cell = |f: &dyn Fn(f64, f64) -> bool| {
        BinaryCell::from_fn(n, n, |r, c| f(folded(c, n).abs(), folded(r, n).abs())).expect("positive size")
    };
    match family {
        Family::Crosses => {
            let a = rng.random_range(0.08..0.4);
            let b = rng.random_range(0.08..0.4);
            cell(&|x, y| y < a || x < b)
        }
        Family::Bars => {
            let edge = rng.random_range(0.05..0.2);
            let mid = rng.random_range(0.05..0.3);
            let horizontal = rng.random::<bool>();
            cell(&|x, y| {
                let (along, across) = if horizontal { (y, x) } else { (x, y) };
                0.5 - along < edge || across < mid
            })
        }
        Family::RingSlots => {
            let outer = rng.random_range(0.25..0.48);
            let inner = rng.random_range(0.35..0.85) * outer;
            let slot = rng.random_range(0.04..0.15);
            cell(&|x, y| {
                let rad = (x * x + y * y).sqrt();
                (inner..outer).contains(&rad) || (rad >= inner && (x < slot || y < slot))
            })
        }
        Family::RandomSymmetricLevelset => {
            let modes = 4;
            let coef: Vec<f64> = (0..modes * modes)
                .map(|k| {
                    let (i, j) = (k / modes, k % modes);
                    standard_normal(rng) / (1.0 + (i * i + j * j) as f64)
                })
                .collect();
            let field = |x: f64, y: f64| -> f64 {
                (0..modes * modes)
                    .map(|k| {
                        let (i, j) = ((k / modes) as f64, (k % modes) as f64);
                        let tau = std::f64::consts::TAU;
                        coef[k] * (tau * i * x).cos() * (tau * j * y).cos()
                    })
                    .sum()
            };
            let mut values: Vec<f64> = (0..n * n).map(|p| field(folded(p % n, n).abs(), folded(p / n, n).abs())).collect();
            let target = rng.random_range(0.35..0.65);
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let level = sorted[((1.0 - target) * (n * n) as f64) as usize];
            values.iter_mut().for_each(|v| *v -= level);
            largest_component(&BinaryCell::from_fn(n, n, |r, c| values[r * n + c] >= 0.0).expect("positive size"))
        }
    }
}

/// Keeps the largest 4-connected material component (ties to the earliest).
fn largest_component(cell: &BinaryCell) -> BinaryCell {
    let (h, w) = (cell.height(), cell.width());
    let mut label = vec![0usize; h * w];
    let mut best = (0, 0);
    let mut next = 0;
    for start in 0..h * w {
        if cell.values()[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        let mut queue = VecDeque::from([start]);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let neighbours = [
                (r > 0).then(|| p - w),
                (r + 1 < h).then(|| p + w),
                (c > 0).then(|| p - 1),
                (c + 1 < w).then(|| p + 1),
            ];
            for q in neighbours.into_iter().flatten() {
                if cell.values()[q] == 1 && label[q] == 0 {
                    label[q] = next;
                    queue.push_back(q);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    BinaryCell::from_fn(h, w, |r, c| best.0 != 0 && label[r * w + c] == best.0).expect("positive size")
}

/// Generates `count` valid nominal designs. Design `i` draws from the stream
/// `(seed, i)` and is rejection-sampled until [`is_valid_nominal`] holds.
pub fn gen_nominals(count: usize, resolution: usize, family: Family, seed: u64) -> Result<Vec<BinaryCell>, PipelineError> {
    if count == 0 || resolution < 4 {
        return Err(PipelineError::Config(format!(
            "need count >= 1 and resolution >= 4, got {count} at {resolution}"
        )));
    }
    (0..count)
        .map(|i| {
            let mut rng = stream(seed, &[i as u64]);
            (0..MAX_ATTEMPTS)
                .map(|_| candidate(family, resolution, &mut rng))
                .find(is_valid_nominal)
                .ok_or(PipelineError::GenerationExhausted { index: i, attempts: MAX_ATTEMPTS })
        })
        .collect()
}
