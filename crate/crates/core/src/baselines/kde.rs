use rayon::prelude::*;

use crate::geometry::BinaryCell;

fn squared_distance(a: &BinaryCell, b: &BinaryCell) -> f64 {
    a.hamming(b) as f64
}

/// Negative log-likelihood of `candidates` under an isotropic Gaussian kernel
/// density estimate centred on `refs`, with cells as vectors in `{0,1}^d`.
pub fn kde_neg_loglik(candidates: &[BinaryCell], refs: &[BinaryCell], h: f64) -> f64 {
    assert!(h > 0.0, "bandwidth must be positive");
    assert!(!refs.is_empty(), "need at least one reference");
    let d = refs[0].len() as f64;
    let log_norm = 0.5 * d * (2.0 * std::f64::consts::PI * h * h).ln() + (refs.len() as f64).ln();
    let two_h2 = 2.0 * h * h;
    let terms: Vec<f64> = candidates
        .par_iter()
        .map(|x| {
            let logs: Vec<f64> = refs.iter().map(|r| -squared_distance(x, r) / two_h2).collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            log_norm - lse
        })
        .collect();
    terms.iter().sum()
}

/// Scott's rule for an isotropic kernel: root-mean per-pixel standard
/// deviation of `refs` times `n^(-1/(d+4))`; `1` when undefined or zero.
pub fn scott_bandwidth(refs: &[BinaryCell]) -> f64 {
    let n = refs.len();
    if n < 2 {
        return 1.0;
    }
    let d = refs[0].len();
    let mut counts = vec![0usize; d];
    for r in refs {
        for (c, &v) in counts.iter_mut().zip(r.values()) {
            *c += usize::from(v != 0);
        }
    }
    let nf = n as f64;
    let mean_var = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / nf;
            p * (1.0 - p) * nf / (nf - 1.0)
        })
        .sum::<f64>()
        / d as f64;
    let h = mean_var.sqrt() * nf.powf(-1.0 / (d as f64 + 4.0));
    if h > 0.0 {
        h
    } else {
        1.0
    }
}

/// Median pairwise distance among `refs` divided by `sqrt(2)`; `1` when
/// undefined or zero.
pub fn median_bandwidth(refs: &[BinaryCell]) -> f64 {
    let mut dists: Vec<f64> = Vec::new();
    for i in 0..refs.len() {
        for j in i + 1..refs.len() {
            dists.push(squared_distance(&refs[i], &refs[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 {
        median / std::f64::consts::SQRT_2
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_cells(n: usize, seed: u64) -> Vec<BinaryCell> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| BinaryCell::from_fn(16, 16, |_, _| rng.random::<f64>() < 0.5).unwrap())
            .collect()
    }

    #[test]
    fn zero_distance_kernel() {
        let c = random_cells(1, 0);
        let h = 0.7;
        let want = 128.0 * (2.0 * std::f64::consts::PI * h * h).ln();
        assert!((kde_neg_loglik(&c, &c, h) - want).abs() < 1e-9);
    }

    #[test]
    fn duplicates_and_permutations_do_not_matter() {
        let refs = random_cells(5, 1);
        let cands = random_cells(4, 2);
        let base = kde_neg_loglik(&cands, &refs, 3.0);
        let doubled: Vec<BinaryCell> = refs.iter().chain(&refs).cloned().collect();
        assert!((kde_neg_loglik(&cands, &doubled, 3.0) - base).abs() < 1e-9);
        let mut rev_refs = refs.clone();
        rev_refs.reverse();
        let mut rev_cands = cands.clone();
        rev_cands.rotate_left(1);
        assert!((kde_neg_loglik(&rev_cands, &rev_refs, 3.0) - base).abs() < 1e-9);
    }

    #[test]
    fn matches_naive_sum() {
        let refs = random_cells(6, 3);
        let cands = random_cells(3, 4);
        let h: f64 = 10.0;
        let d = 256.0;
        let naive: f64 = cands
            .iter()
            .map(|x| {
                let p: f64 = refs
                    .iter()
                    .map(|r| (-(x.hamming(r) as f64) / (2.0 * h * h)).exp())
                    .sum::<f64>()
                    / refs.len() as f64;
                0.5 * d * (2.0 * std::f64::consts::PI * h * h).ln() - p.ln()
            })
            .sum();
        let got = kde_neg_loglik(&cands, &refs, h);
        assert!((got - naive).abs() < 1e-9 * naive.abs(), "{got} vs {naive}");
        // far candidates stay finite where the naive sum would underflow
        assert!(kde_neg_loglik(&cands, &refs, 0.05).is_finite());
    }

    #[test]
    fn scott_rule() {
        let a = BinaryCell::filled(4, 4, false).unwrap();
        let b = BinaryCell::filled(4, 4, true).unwrap();
        // every pixel has unbiased variance 1/2
        let want = 0.5f64.sqrt() * 2f64.powf(-1.0 / 20.0);
        assert!((scott_bandwidth(&[a.clone(), b]) - want).abs() < 1e-12);
        assert_eq!(scott_bandwidth(&[a.clone(), a.clone()]), 1.0);
        assert_eq!(scott_bandwidth(&[a]), 1.0);
    }

    #[test]
    fn bandwidth_heuristic() {
        let a = BinaryCell::filled(4, 4, false).unwrap();
        let mut b = a.clone();
        b.set(0, 0, true);
        b.set(1, 1, true);
        assert!((median_bandwidth(&[a.clone(), b]) - 1.0).abs() < 1e-12);
        assert_eq!(median_bandwidth(&[a.clone(), a.clone()]), 1.0);
        assert_eq!(median_bandwidth(&[a]), 1.0);
    }
}
