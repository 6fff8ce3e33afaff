use rayon::prelude::*;

use super::MetricsError;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each real point to its `k`-th nearest other real point.
pub fn nnd_k<P: AsRef<[f64]> + Sync>(real: &[P], k: usize) -> Result<Vec<f64>, MetricsError> {
    if k == 0 || real.len() <= k {
        return Err(MetricsError::TooFewRealPoints { have: real.len(), k });
    }
    Ok(real
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut d: Vec<f64> = real
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, y)| sq_dist(x.as_ref(), y.as_ref()))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect())
}

/// `[j][i]`: generated point `j` lies in the ball of real point `i`.
fn memberships<P: AsRef<[f64]> + Sync>(real: &[P], radii: &[f64], gen: &[P]) -> Vec<Vec<bool>> {
    gen.par_iter()
        .map(|y| {
            real.iter()
                .zip(radii)
                .map(|(x, r)| sq_dist(x.as_ref(), y.as_ref()) <= *r)
                .collect()
        })
        .collect()
}

/// Mean number of real-point neighbourhoods containing a generated point,
/// divided by `k`.
pub fn density<P: AsRef<[f64]> + Sync>(real: &[P], gen: &[P], k: usize) -> Result<f64, MetricsError> {
    let radii = nnd_k(real, k)?;
    if gen.is_empty() {
        return Ok(0.0);
    }
    let hits: usize = memberships(real, &radii, gen)
        .iter()
        .map(|row| row.iter().filter(|b| **b).count())
        .sum();
    Ok(hits as f64 / (k * gen.len()) as f64)
}

/// Fraction of real-point neighbourhoods containing at least one generated point.
pub fn coverage<P: AsRef<[f64]> + Sync>(real: &[P], gen: &[P], k: usize) -> Result<f64, MetricsError> {
    let radii = nnd_k(real, k)?;
    let member = memberships(real, &radii, gen);
    let covered = (0..real.len()).filter(|&i| member.iter().any(|row| row[i])).count();
    Ok(covered as f64 / real.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(xs: &[f64]) -> Vec<[f64; 3]> {
        xs.iter().map(|&x| [x, 0.0, 0.0]).collect()
    }

    #[test]
    fn hand_enumerated() {
        let real = line(&[0.0, 1.0]);
        let gen = line(&[0.5, 2.0]);
        assert_eq!(density(&real, &gen, 1).unwrap(), 1.5);
        assert_eq!(coverage(&real, &gen, 1).unwrap(), 1.0);
        let far = line(&[10.0, -7.0]);
        assert_eq!(density(&real, &far, 1).unwrap(), 0.0);
        assert_eq!(coverage(&real, &far, 1).unwrap(), 0.0);
        assert!(density(&real, &real, 1).unwrap() >= 1.0);
        assert_eq!(coverage(&real, &real, 1).unwrap(), 1.0);
        assert_eq!(density(&real, &gen, 2), Err(MetricsError::TooFewRealPoints { have: 2, k: 2 }));
    }

    fn oracle(real: &[[f64; 3]], gen: &[[f64; 3]], k: usize) -> (f64, f64) {
        let n = real.len();
        let mut radius = vec![0.0; n];
        for i in 0..n {
            let mut d = Vec::new();
            for j in 0..n {
                if i != j {
                    let e: f64 = (0..3).map(|c| (real[i][c] - real[j][c]) * (real[i][c] - real[j][c])).sum();
                    d.push(e);
                }
            }
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            radius[i] = d[k - 1];
        }
        let mut hits = 0usize;
        let mut covered = vec![false; n];
        for y in gen {
            for i in 0..n {
                let e: f64 = (0..3).map(|c| (real[i][c] - y[c]) * (real[i][c] - y[c])).sum();
                if e <= radius[i] {
                    hits += 1;
                    covered[i] = true;
                }
            }
        }
        (
            hits as f64 / (k * gen.len()) as f64,
            covered.iter().filter(|c| **c).count() as f64 / n as f64,
        )
    }

    fn cloud() -> impl Strategy<Value = Vec<[f64; 3]>> {
        prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 6..60)
    }

    proptest! {
        #[test]
        fn matches_brute_force(real in cloud(), gen in cloud(), k in 1usize..5) {
            let (d, c) = oracle(&real, &gen, k);
            prop_assert_eq!(density(&real, &gen, k).unwrap(), d);
            prop_assert_eq!(coverage(&real, &gen, k).unwrap(), c);
            prop_assert!((0.0..=1.0).contains(&c));
        }

        #[test]
        fn isometry_invariant(real in cloud(), gen in cloud(), angle in 0.0f64..6.28, shift in prop::array::uniform3(-3.0f64..3.0)) {
            // quarter turn with dyadic shifts is exact in floating point
            let quarter = |p: &[f64; 3]| [-p[1] + 0.5, p[0] - 0.25, p[2] + 1.0];
            let r2: Vec<[f64; 3]> = real.iter().map(quarter).collect();
            let g2: Vec<[f64; 3]> = gen.iter().map(quarter).collect();
            prop_assert_eq!(density(&real, &gen, 3).unwrap(), density(&r2, &g2, 3).unwrap());
            prop_assert_eq!(coverage(&real, &gen, 3).unwrap(), coverage(&r2, &g2, 3).unwrap());
            let (c, s) = (angle.cos(), angle.sin());
            let rot = |p: &[f64; 3]| [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1], p[2] + shift[2]];
            let r3: Vec<[f64; 3]> = real.iter().map(rot).collect();
            let g3: Vec<[f64; 3]> = gen.iter().map(rot).collect();
            let dd = (density(&real, &gen, 3).unwrap() - density(&r3, &g3, 3).unwrap()).abs();
            let near_boundary = {
                let radii = nnd_k(&real, 3).unwrap();
                gen.iter().any(|y| real.iter().zip(&radii).any(|(x, r)| (sq_dist(x, y) - r).abs() < 1e-9 * (1.0 + r)))
            };
            prop_assert!(near_boundary || dd == 0.0);
        }
    }
}
