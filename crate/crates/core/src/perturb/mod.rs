//! Stochastic perturbation operators and synthetic "as-fabricated" datasets.
//!
//! A [`PerturbPipeline`] draws a sequence length and a sequence of operators
//! from its catalog and composes them, rightmost first, on a nominal design.
//! [`build_dataset`] repeats this per nominal and variant with independent
//! seed-addressed streams.

mod dataset;
mod ffd;
mod hole;

pub use dataset::{augment_dataset, build_dataset, PairedDataset, Record, Role};
pub use ffd::{
    bernstein, displacement_field, ffd_deform, ffd_deform_with, warp_field, ControlOffsets,
    FfdConfig,
};
pub use hole::{
    apply_hole, nucleate_hole, sample_covariance, sample_hole, Amplitude, Cov2, HoleConfig,
    HoleParams,
};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dilate, erode, to_binary, to_sdf, BinaryCell, MorphScale};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error("invalid perturbation config: {0}")]
    InvalidConfig(String),
    #[error("no material pixel available to seed a hole")]
    NoInteriorMaterial,
    #[error("covariance draw kept underflowing")]
    DegenerateCovariance,
    #[error("nominal {nominal_id} produced only degenerate variants")]
    DatasetDegenerate { nominal_id: u32 },
    #[error("dataset is inconsistent: {0}")]
    InvalidDataset(String),
}

/// One entry of a pipeline's operator catalog.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Operator {
    Ffd(FfdConfig),
    Hole(HoleConfig),
    Dilate { scale: MorphScale },
    Erode { scale: MorphScale },
}

impl Operator {
    pub fn apply<R: Rng + ?Sized>(&self, cell: &BinaryCell, rng: &mut R) -> Result<BinaryCell, PerturbError> {
        match self {
            Operator::Ffd(cfg) => ffd_deform(cell, cfg, rng),
            Operator::Hole(cfg) => {
                let sdf = nucleate_hole(&to_sdf(cell), cfg, rng)?;
                Ok(to_binary(&sdf, 0.0))
            }
            Operator::Dilate { scale } => Ok(dilate(cell, *scale)),
            Operator::Erode { scale } => Ok(erode(cell, *scale)),
        }
    }
}

/// A random composition of perturbation operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbPipeline {
    pub operators: Vec<Operator>,
    /// Probability of each sequence length; entry `l` is `P(length = l)`.
    pub length_distribution: Vec<f64>,
    /// Probability of drawing each catalog entry at every position.
    pub operator_distribution: Vec<f64>,
}

impl PerturbPipeline {
    /// FFD only, one application per variant.
    pub fn pretrain(ffd: FfdConfig) -> Self {
        Self {
            operators: vec![Operator::Ffd(ffd)],
            length_distribution: vec![0.0, 1.0],
            operator_distribution: vec![1.0],
        }
    }

    /// FFD and holes mixed 0.7/0.3, sequences of length 1 or 2.
    pub fn finetune(ffd: FfdConfig, hole: HoleConfig) -> Self {
        Self {
            operators: vec![Operator::Ffd(ffd), Operator::Hole(hole)],
            length_distribution: vec![0.0, 0.5, 0.5],
            operator_distribution: vec![0.7, 0.3],
        }
    }

    /// The empty composition.
    pub fn identity() -> Self {
        Self {
            operators: vec![Operator::Ffd(FfdConfig { m: 4, sigma: 0.0 })],
            length_distribution: vec![1.0],
            operator_distribution: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        if self.operators.is_empty() {
            return Err(PerturbError::InvalidConfig("pipeline has no operators".into()));
        }
        if self.operator_distribution.len() != self.operators.len() {
            return Err(PerturbError::InvalidConfig(
                "operator_distribution must have one weight per operator".into(),
            ));
        }
        for (name, dist) in [
            ("length_distribution", &self.length_distribution),
            ("operator_distribution", &self.operator_distribution),
        ] {
            if dist.is_empty() || dist.iter().any(|&p| !(p >= 0.0)) {
                return Err(PerturbError::InvalidConfig(format!("{name} has invalid weights")));
            }
            let total: f64 = dist.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(PerturbError::InvalidConfig(format!(
                    "{name} sums to {total}, expected 1"
                )));
            }
        }
        for op in &self.operators {
            match op {
                Operator::Ffd(c) => c.validate()?,
                Operator::Hole(c) => c.validate()?,
                Operator::Dilate { .. } | Operator::Erode { .. } => {}
            }
        }
        Ok(())
    }
}

/// Applies a random operator sequence `F_i1 ∘ ... ∘ F_il` to a nominal design.
pub fn apply_pipeline<R: Rng + ?Sized>(
    nominal: &BinaryCell,
    pipe: &PerturbPipeline,
    rng: &mut R,
) -> Result<BinaryCell, PerturbError> {
    pipe.validate()?;
    let lengths = WeightedIndex::new(&pipe.length_distribution)
        .map_err(|e| PerturbError::InvalidConfig(e.to_string()))?;
    let ops = WeightedIndex::new(&pipe.operator_distribution)
        .map_err(|e| PerturbError::InvalidConfig(e.to_string()))?;
    let len = lengths.sample(rng);
    let sequence: Vec<usize> = (0..len).map(|_| ops.sample(rng)).collect();
    let mut cell = nominal.clone();
    for &idx in sequence.iter().rev() {
        cell = pipe.operators[idx].apply(&cell, rng)?;
    }
    Ok(cell)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn plus(n: usize) -> BinaryCell {
        BinaryCell::from_fn(n, n, |r, c| {
            (r as i64 - n as i64 / 2).abs() < 4 || (c as i64 - n as i64 / 2).abs() < 5
        })
        .unwrap()
    }

    #[test]
    fn empty_composition_and_zero_ffd() {
        let cell = plus(32);
        let out = apply_pipeline(&cell, &PerturbPipeline::identity(), &mut rng_from_seed(0)).unwrap();
        assert_eq!(out, cell);
        let zero = PerturbPipeline::pretrain(FfdConfig { m: 4, sigma: 0.0 });
        assert_eq!(apply_pipeline(&cell, &zero, &mut rng_from_seed(1)).unwrap(), cell);
    }

    #[test]
    fn deterministic_under_seed() {
        let cell = plus(32);
        let pipe = PerturbPipeline {
            operators: vec![Operator::Ffd(FfdConfig::default()), Operator::Hole(HoleConfig::default())],
            length_distribution: vec![0.0, 0.0, 1.0],
            operator_distribution: vec![0.5, 0.5],
        };
        let a = apply_pipeline(&cell, &pipe, &mut rng_from_seed(77)).unwrap();
        let b = apply_pipeline(&cell, &pipe, &mut rng_from_seed(77)).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn composition_order_is_right_to_left() {
        // dilate then erode differs from erode then dilate on a thin line
        let cell = BinaryCell::from_fn(12, 12, |r, c| r == 6 && c > 2).unwrap();
        let s = MorphScale::new(3).unwrap();
        let pipe = PerturbPipeline {
            operators: vec![Operator::Dilate { scale: s }, Operator::Erode { scale: s }],
            length_distribution: vec![0.0, 0.0, 1.0],
            operator_distribution: vec![0.5, 0.5],
        };
        for seed in 0..32 {
            // replay the draws to learn the sequence
            let mut rng = rng_from_seed(seed);
            let l = WeightedIndex::new(&pipe.length_distribution).unwrap().sample(&mut rng);
            let ops = WeightedIndex::new(&pipe.operator_distribution).unwrap();
            let seq: Vec<usize> = (0..l).map(|_| ops.sample(&mut rng)).collect();
            let mut expected = cell.clone();
            for &i in seq.iter().rev() {
                expected = pipe.operators[i].apply(&expected, &mut rng).unwrap();
            }
            let got = apply_pipeline(&cell, &pipe, &mut rng_from_seed(seed)).unwrap();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn validation() {
        let mut p = PerturbPipeline::pretrain(FfdConfig::default());
        p.length_distribution = vec![0.5, 0.4];
        assert!(p.validate().is_err());
        let mut p = PerturbPipeline::pretrain(FfdConfig::default());
        p.operators.clear();
        assert!(p.validate().is_err());
        let p = PerturbPipeline::pretrain(FfdConfig { m: 1, sigma: 1.0 });
        assert!(p.validate().is_err());
    }
}
