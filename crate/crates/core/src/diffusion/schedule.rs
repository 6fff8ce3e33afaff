use serde::{Deserialize, Serialize};

use super::DiffusionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Constructor arguments of a schedule, persisted with checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Per-timestep constants of the forward noising chain. Index `t - 1` holds
/// the values for timestep `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule, DiffusionError> {
    if timesteps == 0 {
        return Err(DiffusionError::InvalidSchedule("T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..timesteps)
            .map(|k| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * k as f64 / (timesteps - 1) as f64
                }
            })
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars: Vec<f64> = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            timesteps,
            beta_start,
            beta_end,
            kind,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Reverse-step standard deviation, fixed to `sqrt(beta_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }
}

/// Closed-form draw from `q(x_t | x_0)`: `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
/// `t = 0` returns `x0`.
pub fn forward_sample(x0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Vec<f64> {
    assert_eq!(x0.len(), eps.len(), "x0 and eps must have the same shape");
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}
