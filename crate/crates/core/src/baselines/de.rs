use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub pop_size: usize,
    /// Differential weight `F`.
    pub f_weight: f64,
    /// Binomial crossover probability.
    pub crossover: f64,
    pub max_gen: usize,
    /// Generations without improvement before giving up on a spread population.
    pub stall_generations: usize,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            pop_size: 20,
            f_weight: 0.8,
            crossover: 0.9,
            max_gen: 200,
            stall_generations: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Best objective value after initialization and after each generation.
    pub trace: Vec<f64>,
    pub generations: usize,
    /// Set when the search stopped on the stall rule rather than on
    /// convergence or the generation cap.
    pub stalled: bool,
}

fn best_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

fn converged(values: &[f64]) -> bool {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo <= 1e-12 * (1.0 + lo.abs())
}

/// DE/rand/1/bin minimization inside box `bounds`. Trial vectors are clipped
/// to the box. All random draws happen on one stream before each
/// generation's parallel evaluation, so results depend only on `cfg.seed`.
pub fn differential_evolution<F>(objective: F, bounds: &[(f64, f64)], cfg: &DeConfig) -> DeResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert!(cfg.pop_size >= 4, "population must hold at least 4 members");
    assert!(!bounds.is_empty(), "need at least one dimension");
    assert!(
        bounds.iter().all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo <= hi),
        "bounds must be finite and ordered"
    );
    let dim = bounds.len();
    let np = cfg.pop_size;
    let mut rng = rng_from_seed(cfg.seed);
    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|_| bounds.iter().map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect())
        .collect();
    let eval = |xs: &[Vec<f64>]| -> Vec<f64> {
        xs.par_iter()
            .map(|x| {
                let v = objective(x);
                if v.is_nan() {
                    f64::INFINITY
                } else {
                    v
                }
            })
            .collect()
    };
    let mut values = eval(&pop);
    let mut best = best_index(&values);
    let mut trace = vec![values[best]];
    let mut since_improvement = 0;
    let mut stalled = false;
    let mut generations = 0;

    while generations < cfg.max_gen && !converged(&values) {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let pick = |rng: &mut _, taken: &[usize]| loop {
                    let k = Rng::random_range(rng, 0..np);
                    if !taken.contains(&k) {
                        break k;
                    }
                };
                let a = pick(&mut rng, &[i]);
                let b = pick(&mut rng, &[i, a]);
                let c = pick(&mut rng, &[i, a, b]);
                let j_rand = rng.random_range(0..dim);
                (0..dim)
                    .map(|j| {
                        let cross = rng.random::<f64>() < cfg.crossover || j == j_rand;
                        if cross {
                            let v = pop[a][j] + cfg.f_weight * (pop[b][j] - pop[c][j]);
                            v.clamp(bounds[j].0, bounds[j].1)
                        } else {
                            pop[i][j]
                        }
                    })
                    .collect()
            })
            .collect();
        let trial_values = eval(&trials);
        for (i, (x, v)) in trials.into_iter().zip(trial_values).enumerate() {
            if v <= values[i] {
                pop[i] = x;
                values[i] = v;
            }
        }
        generations += 1;
        let new_best = best_index(&values);
        if values[new_best] < values[best] {
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        best = new_best;
        trace.push(values[best]);
        if since_improvement >= cfg.stall_generations && !converged(&values) {
            log::warn!("differential evolution stalled after {generations} generations");
            stalled = true;
            break;
        }
    }
    DeResult {
        x: pop[best].clone(),
        value: values[best],
        trace,
        generations,
        stalled,
    }
}
