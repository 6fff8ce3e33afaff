use super::{BinaryCell, SdfGrid};

/// Exact signed Euclidean distance transform of a cell.
///
/// Material pixels carry the distance from their center to the nearest void
/// pixel center, void pixels the negated distance to the nearest material
/// pixel center. A phase with no opposite pixel saturates at the grid diagonal.
pub fn to_sdf(cell: &BinaryCell) -> SdfGrid {
    let (h, w) = (cell.height(), cell.width());
    let diag = ((h * h + w * w) as f64).sqrt();
    let to_void = squared_edt(h, w, |i| cell.values()[i] == 0);
    let to_material = squared_edt(h, w, |i| cell.values()[i] == 1);
    let values = cell
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == 1 {
                to_void[i].sqrt().min(diag)
            } else {
                -to_material[i].sqrt().min(diag)
            }
        })
        .collect();
    SdfGrid::new(h, w, values).expect("finite by construction")
}

/// Thresholds a field: material where `value > threshold`.
pub fn to_binary(sdf: &SdfGrid, threshold: f64) -> BinaryCell {
    let values = sdf
        .values()
        .iter()
        .map(|&v| (v > threshold) as u8)
        .collect();
    BinaryCell::new(sdf.height(), sdf.width(), values).expect("grid from a valid field")
}

// Stand-in for an infinite squared distance that keeps the envelope
// intersections finite.
const FAR: f64 = 1e18;

/// Squared distance from every pixel to the nearest pixel where `is_site`
/// holds, via separable lower envelopes of parabolas.
fn squared_edt(h: usize, w: usize, is_site: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..h * w)
        .map(|i| if is_site(i) { 0.0 } else { FAR })
        .collect();
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        envelope_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = d[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        envelope_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

fn envelope_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *out = (qf - p) * (qf - p) + f[v[k]];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_sdf(cell: &BinaryCell) -> Vec<f64> {
        let (h, w) = (cell.height(), cell.width());
        let diag = ((h * h + w * w) as f64).sqrt();
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let here = cell.get(r, c);
                let mut best = f64::INFINITY;
                for rr in 0..h {
                    for cc in 0..w {
                        if cell.get(rr, cc) != here {
                            let dr = r as f64 - rr as f64;
                            let dc = c as f64 - cc as f64;
                            best = best.min((dr * dr + dc * dc).sqrt());
                        }
                    }
                }
                let mag = best.min(diag);
                out[r * w + c] = if here { mag } else { -mag };
            }
        }
        out
    }

    fn cell_strategy(max: usize) -> impl Strategy<Value = BinaryCell> {
        (4..=max, 4..=max).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..=1, h * w)
                .prop_map(move |v| BinaryCell::new(h, w, v).unwrap())
        })
    }

    #[test]
    fn single_material_pixel() {
        let cell = BinaryCell::from_fn(9, 9, |r, c| r == 4 && c == 4).unwrap();
        let sdf = to_sdf(&cell);
        assert_eq!(sdf.get(4, 4), 1.0);
        assert_eq!(sdf.get(4, 6), -2.0);
        assert_eq!(sdf.values(), brute_force_sdf(&cell).as_slice());
    }

    #[test]
    fn single_phase_saturates() {
        let ones = BinaryCell::filled(8, 8, true).unwrap();
        assert!(to_sdf(&ones).values().iter().all(|&v| v >= 0.5));
        let zeros = BinaryCell::filled(8, 8, false).unwrap();
        assert!(to_sdf(&zeros).values().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn threshold_rules() {
        let pos = SdfGrid::from_fn(6, 6, |_, _| 0.25);
        assert_eq!(to_binary(&pos, 0.0).volume_fraction(), 1.0);
        assert_eq!(to_binary(&pos, f64::INFINITY).volume_fraction(), 0.0);

        // disk of radius 3.2 around (7, 7)
        let radius = 3.2;
        let disk = SdfGrid::from_fn(15, 15, |r, c| {
            let (dr, dc) = (r as f64 - 7.0, c as f64 - 7.0);
            radius - (dr * dr + dc * dc).sqrt()
        });
        let cell = to_binary(&disk, 0.0);
        for r in 0..15 {
            for c in 0..15 {
                let (dr, dc) = (r as f64 - 7.0, c as f64 - 7.0);
                assert_eq!(cell.get(r, c), dr * dr + dc * dc < radius * radius);
            }
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force(cell in cell_strategy(20)) {
            let fast = to_sdf(&cell);
            let slow = brute_force_sdf(&cell);
            for (a, b) in fast.values().iter().zip(&slow) {
                prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
        }

        #[test]
        fn round_trip_two_phase(cell in cell_strategy(24)) {
            prop_assume!(cell.material_count() > 0 && cell.material_count() < cell.len());
            prop_assert_eq!(to_binary(&to_sdf(&cell), 0.0), cell);
        }
    }

    #[test]
    fn matches_brute_force_at_32() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cell = BinaryCell::from_fn(32, 32, |_, _| rng.random_bool(0.15)).unwrap();
        let fast = to_sdf(&cell);
        for (a, b) in fast.values().iter().zip(brute_force_sdf(&cell)) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}
