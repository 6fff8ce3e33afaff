//! Generative uncertainty learning for 2D metamaterial unit cells.
//!
//! The crate covers the whole workflow: synthesizing paired nominal /
//! as-fabricated geometries with stochastic perturbation operators
//! ([`perturb`]), learning the conditional distribution of fabricated
//! geometries with a conditional denoising diffusion model that is pretrained
//! on synthetic pairs and fine-tuned on scarce target data ([`diffusion`]),
//! classical comparison methods ([`baselines`]), effective elastic properties
//! by periodic homogenization ([`homogenize`]), distributional metrics
//! ([`metrics`]) and the staged experiment driver ([`pipeline`]).

pub mod baselines;
pub mod diffusion;
pub mod geometry;
pub mod homogenize;
pub mod metrics;
pub mod perturb;
pub mod pipeline;
pub mod rng;
