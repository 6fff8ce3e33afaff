use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::MetricsError;
use crate::geometry::BinaryCell;
use crate::rng::{rng_from_seed, standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Tsne,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Generated,
}

/// Exact t-SNE optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations with exaggerated affinities and momentum 0.5.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Neighbour rank defining each real point's ball radius.
    pub k: usize,
    pub perplexity: f64,
    pub embedding: EmbeddingKind,
    pub seed: u64,
    pub tsne: TsneConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            k: 5,
            perplexity: 10.0,
            embedding: EmbeddingKind::Tsne,
            seed: 0,
            tsne: TsneConfig::default(),
        }
    }
}

impl MetricConfig {
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_string(self).expect("serializable").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedSet {
    pub points: Vec<[f64; 3]>,
    pub source: Source,
    pub config_hash: String,
}

/// Minimum number of points in a joint embedding.
const MIN_POINTS: usize = 10;

/// Embeds real and generated cells jointly as flattened pixel vectors.
pub fn embed(real: &[BinaryCell], gen: &[BinaryCell], cfg: &MetricConfig) -> Result<(EmbeddedSet, EmbeddedSet), MetricsError> {
    let to_vec = |c: &BinaryCell| c.values().iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let r: Vec<Vec<f64>> = real.iter().map(to_vec).collect();
    let g: Vec<Vec<f64>> = gen.iter().map(to_vec).collect();
    embed_vectors(&r, &g, cfg)
}

pub fn embed_vectors(real: &[Vec<f64>], gen: &[Vec<f64>], cfg: &MetricConfig) -> Result<(EmbeddedSet, EmbeddedSet), MetricsError> {
    let union: Vec<Vec<f64>> = real.iter().chain(gen).cloned().collect();
    let points = match cfg.embedding {
        EmbeddingKind::Pca => pca_embed(&union)?,
        EmbeddingKind::Tsne => tsne_embed(&union, cfg.perplexity, &cfg.tsne, cfg.seed)?,
    };
    let hash = cfg.hash();
    let (r, g) = points.split_at(real.len());
    Ok((
        EmbeddedSet {
            points: r.to_vec(),
            source: Source::Real,
            config_hash: hash.clone(),
        },
        EmbeddedSet {
            points: g.to_vec(),
            source: Source::Generated,
            config_hash: hash,
        },
    ))
}

fn check_points(x: &[Vec<f64>]) -> Result<usize, MetricsError> {
    if x.len() < MIN_POINTS {
        return Err(MetricsError::TooFewPoints { have: x.len(), need: MIN_POINTS });
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|p| p.len() != d) {
        return Err(MetricsError::DimensionMismatch);
    }
    Ok(d)
}

/// Scores on the top three principal components of `x`, with each axis
/// signed so that its largest-magnitude score is positive.
pub fn pca_embed(x: &[Vec<f64>]) -> Result<Vec<[f64; 3]>, MetricsError> {
    let d = check_points(x)?;
    let n = x.len();
    let mut mean = vec![0.0; d];
    for p in x {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    // Scores come from whichever of the Gram and scatter matrices is smaller.
    let scores: Vec<Vec<f64>> = if n <= d {
        let gram = &centered * centered.transpose();
        let eig = gram.symmetric_eigen();
        top3(&eig.eigenvalues.iter().copied().collect::<Vec<_>>())
            .into_iter()
            .map(|k| {
                let s = eig.eigenvalues[k].max(0.0).sqrt();
                (0..n).map(|i| eig.eigenvectors[(i, k)] * s).collect()
            })
            .collect()
    } else {
        let scatter = centered.transpose() * &centered;
        let eig = scatter.symmetric_eigen();
        top3(&eig.eigenvalues.iter().copied().collect::<Vec<_>>())
            .into_iter()
            .map(|k| (&centered * eig.eigenvectors.column(k)).iter().copied().collect())
            .collect()
    };
    let mut out = vec![[0.0; 3]; n];
    for (axis, mut s) in scores.into_iter().enumerate() {
        let pivot = s.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            s.iter_mut().for_each(|v| *v = -*v);
        }
        for (o, v) in out.iter_mut().zip(s) {
            o[axis] = v;
        }
    }
    Ok(out)
}

fn top3(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(3);
    order
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.par_iter()
        .map(|a| x.iter().map(|b| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()).collect())
        .collect()
}

/// Conditional affinities of row `i` with entropy `ln(perplexity)`.
fn row_affinities(d: &[f64], i: usize, target_entropy: f64) -> Vec<f64> {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let mut beta = 1.0;
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut p = vec![0.0; d.len()];
    for _ in 0..100 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (j, &dj) in d.iter().enumerate() {
            p[j] = if j == i { 0.0 } else { (-(dj - dmin) * beta).exp() };
            sum += p[j];
            weighted += (dj - dmin) * p[j];
        }
        let entropy = sum.ln() + beta * weighted / sum;
        p.iter_mut().for_each(|v| *v /= sum);
        let diff = entropy - target_entropy;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
    }
    p
}

/// Exact t-SNE into three dimensions.
pub fn tsne_embed(x: &[Vec<f64>], perplexity: f64, cfg: &TsneConfig, seed: u64) -> Result<Vec<[f64; 3]>, MetricsError> {
    check_points(x)?;
    let n = x.len();
    if !(perplexity > 0.0) || perplexity >= (n - 1) as f64 / 3.0 {
        return Err(MetricsError::PerplexityTooLarge { perplexity, points: n });
    }
    let dist = squared_distances(x);
    let target = perplexity.ln();
    let cond: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| row_affinities(&dist[i], i, target)).collect();
    let p: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12)).collect())
        .collect();

    let mut rng = rng_from_seed(seed);
    let mut y: Vec<[f64; 3]> = (0..n)
        .map(|_| [0; 3].map(|_| 1e-4 * standard_normal(&mut rng)))
        .collect();
    let mut update = vec![[0.0; 3]; n];
    let mut gains = vec![[1.0f64; 3]; n];
    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iters;
        let exaggeration = if early { cfg.early_exaggeration } else { 1.0 };
        let momentum = if early { cfg.initial_momentum } else { cfg.final_momentum };
        let num: Vec<Vec<f64>> = y
            .par_iter()
            .enumerate()
            .map(|(i, yi)| {
                y.iter()
                    .enumerate()
                    .map(|(j, yj)| {
                        if i == j {
                            0.0
                        } else {
                            let d2: f64 = (0..3).map(|c| (yi[c] - yj[c]) * (yi[c] - yj[c])).sum();
                            1.0 / (1.0 + d2)
                        }
                    })
                    .collect()
            })
            .collect();
        let total: f64 = num.iter().map(|row| row.iter().sum::<f64>()).sum();
        let grad: Vec<[f64; 3]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 3];
                for j in 0..n {
                    let w = (exaggeration * p[i][j] - (num[i][j] / total).max(1e-12)) * num[i][j];
                    for c in 0..3 {
                        g[c] += 4.0 * w * (y[i][c] - y[j][c]);
                    }
                }
                g
            })
            .collect();
        for i in 0..n {
            for c in 0..3 {
                let same_sign = (grad[i][c] > 0.0) == (update[i][c] > 0.0);
                gains[i][c] = if same_sign { gains[i][c] * 0.8 } else { gains[i][c] + 0.2 };
                gains[i][c] = gains[i][c].max(0.01);
                update[i][c] = momentum * update[i][c] - cfg.learning_rate * gains[i][c] * grad[i][c];
                y[i][c] += update[i][c];
            }
        }
        let mut mean = [0.0; 3];
        for yi in &y {
            for c in 0..3 {
                mean[c] += yi[c] / n as f64;
            }
        }
        for yi in y.iter_mut() {
            for c in 0..3 {
                yi[c] -= mean[c];
            }
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricsError::InvalidConfig("t-SNE diverged".into()));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
    }

    #[test]
    fn pca_recovers_affine_subspace() {
        let mut rng = rng_from_seed(1);
        let basis: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| standard_normal(&mut rng)).collect()).collect();
        let x: Vec<Vec<f64>> = (0..25)
            .map(|_| {
                let c: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
                (0..8).map(|j| 1.5 + (0..3).map(|k| c[k] * basis[k][j]).sum::<f64>()).collect()
            })
            .collect();
        for pts in [x.clone(), x.iter().map(|p| p.iter().chain(&[0.0; 40]).copied().collect()).collect()] {
            let y = pca_embed(&pts).unwrap();
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    assert!((dist(&pts[i], &pts[j]) - dist(&y[i], &y[j])).abs() < 1e-9);
                }
            }
        }
    }

    fn clusters() -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(3);
        (0..60)
            .map(|i| {
                let centre = if i < 30 { 0.0 } else { 20.0 };
                (0..10).map(|_| centre + standard_normal(&mut rng)).collect()
            })
            .collect()
    }

    #[test]
    fn tsne_separates_clusters_reproducibly() {
        let x = clusters();
        let cfg = TsneConfig { iterations: 500, ..TsneConfig::default() };
        let y = tsne_embed(&x, 10.0, &cfg, 7).unwrap();
        assert_eq!(y, tsne_embed(&x, 10.0, &cfg, 7).unwrap());
        let mut inter = f64::INFINITY;
        let mut intra: f64 = 0.0;
        for i in 0..60 {
            for j in i + 1..60 {
                let d = dist(&y[i], &y[j]);
                if (i < 30) == (j < 30) {
                    intra = intra.max(d);
                } else {
                    inter = inter.min(d);
                }
            }
        }
        assert!(inter > intra, "inter {inter} intra {intra}");
    }

    #[test]
    fn perplexity_guard() {
        let x = clusters();
        assert!(matches!(
            tsne_embed(&x[..20], 10.0, &TsneConfig::default(), 0),
            Err(MetricsError::PerplexityTooLarge { .. })
        ));
        assert!(matches!(pca_embed(&x[..5]), Err(MetricsError::TooFewPoints { .. })));
    }

    #[test]
    fn joint_split() {
        let cells: Vec<BinaryCell> = (0..12).map(|i| BinaryCell::from_fn(4, 4, |r, c| (r * 4 + c + i) % 3 == 0).unwrap()).collect();
        let cfg = MetricConfig { embedding: EmbeddingKind::Pca, ..MetricConfig::default() };
        let (r, g) = embed(&cells[..7], &cells[7..], &cfg).unwrap();
        assert_eq!((r.points.len(), g.points.len()), (7, 5));
        assert_eq!(r.source, Source::Real);
        assert_eq!(r.config_hash, g.config_hash);
        assert_eq!(r.config_hash.len(), 64);
    }
}
