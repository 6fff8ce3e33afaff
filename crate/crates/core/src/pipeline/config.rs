use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nominals::Family;
use super::PipelineError;
use crate::baselines::{GrfConfig, MorphFitConfig};
use crate::diffusion::{DenoiserConfig, FreezeSpec, ScheduleSpec, TrainConfig};
use crate::homogenize::{Material, DEFAULT_VOID_RATIO};
use crate::metrics::MetricConfig;
use crate::perturb::{Amplitude, FfdConfig, HoleConfig, PerturbPipeline};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(format!("unknown profile `{other}`")),
        }
    }
}

/// One synthetic paired dataset: nominals and perturbed variants of each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub nominals: usize,
    pub variants: usize,
    pub pipeline: PerturbPipeline,
}

/// Held-out designs: ground truth variants drawn with the fine-tuning
/// process and generated samples per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub nominals: usize,
    pub truth_variants: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub grf: GrfConfig,
    pub morph: MorphFitConfig,
    /// Training from scratch on the fine-tuning data.
    pub direct_train: TrainConfig,
    /// Perturbed copies per fabricated record for augmented direct training;
    /// `0` skips that method.
    pub augment_factor: usize,
    pub augment_pipeline: PerturbPipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub resolution: usize,
    pub seed: u64,
    pub family: Family,
    /// Directory of nominal design images used instead of generated designs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominals_dir: Option<PathBuf>,
    pub import_threshold: u8,
    pub pretrain: DataConfig,
    pub finetune: DataConfig,
    pub eval: EvalConfig,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserConfig,
    pub pretrain_train: TrainConfig,
    pub finetune_train: TrainConfig,
    pub freeze: FreezeSpec,
    pub baselines: BaselineConfig,
    pub metrics: MetricConfig,
    pub material: Material,
    pub void_ratio: f64,
    pub out_dir: PathBuf,
}

fn finetune_hole() -> HoleConfig {
    HoleConfig {
        alpha: Amplitude::MaxSdfMultiple(1.5),
        ..HoleConfig::default()
    }
}

impl ExperimentConfig {
    pub fn paper() -> Self {
        Self {
            resolution: 64,
            seed: 0,
            family: Family::RandomSymmetricLevelset,
            nominals_dir: None,
            import_threshold: 128,
            pretrain: DataConfig {
                nominals: 3000,
                variants: 20,
                pipeline: PerturbPipeline::pretrain(FfdConfig { m: 4, sigma: 6.0 }),
            },
            finetune: DataConfig {
                nominals: 15,
                variants: 64,
                pipeline: PerturbPipeline::finetune(FfdConfig { m: 4, sigma: 13.0 }, finetune_hole()),
            },
            eval: EvalConfig {
                nominals: 30,
                truth_variants: 3000,
                samples: 3000,
            },
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserConfig::paper(),
            pretrain_train: TrainConfig::paper_pretrain(),
            finetune_train: TrainConfig::paper_finetune(),
            freeze: FreezeSpec::nothing(),
            baselines: BaselineConfig {
                grf: GrfConfig::default(),
                morph: MorphFitConfig::default(),
                direct_train: TrainConfig::paper_finetune(),
                augment_factor: 62,
                augment_pipeline: PerturbPipeline::pretrain(FfdConfig { m: 4, sigma: 6.0 }),
            },
            metrics: MetricConfig::default(),
            material: Material::default(),
            void_ratio: DEFAULT_VOID_RATIO,
            out_dir: PathBuf::from("gust-out"),
        }
    }

    /// Scaled down to a single CPU: 32×32 cells, a small denoiser and a short
    /// 100-step schedule.
    pub fn desk() -> Self {
        let paper = Self::paper();
        let train = TrainConfig {
            iterations: 3000,
            batch_size: 16,
            initial_lr: 1e-3,
            decay_factor: 0.9,
            decay_every: 300,
            lr_floor: 1e-5,
            ..TrainConfig::paper_pretrain()
        };
        Self {
            resolution: 32,
            pretrain: DataConfig {
                nominals: 200,
                variants: 10,
                pipeline: PerturbPipeline::pretrain(FfdConfig { m: 4, sigma: 3.0 }),
            },
            finetune: DataConfig {
                nominals: 10,
                variants: 32,
                pipeline: PerturbPipeline::finetune(FfdConfig { m: 4, sigma: 6.0 }, finetune_hole()),
            },
            eval: EvalConfig {
                nominals: 5,
                truth_variants: 500,
                samples: 500,
            },
            schedule: ScheduleSpec {
                timesteps: 100,
                beta_start: 1e-4,
                beta_end: 0.2,
                ..ScheduleSpec::default()
            },
            denoiser: DenoiserConfig {
                levels: 3,
                base_channels: 8,
                channel_mults: vec![1, 2, 2],
                attention_levels: vec![2],
                time_embed_dim: 32,
                cond_hidden: 8,
                norm_groups: 4,
                bottleneck_width: 32,
            },
            pretrain_train: train.clone(),
            finetune_train: TrainConfig {
                iterations: 1000,
                decay_every: 100,
                ..train.clone()
            },
            baselines: BaselineConfig {
                direct_train: TrainConfig {
                    iterations: 1000,
                    decay_every: 100,
                    ..train
                },
                augment_factor: 0,
                augment_pipeline: PerturbPipeline::pretrain(FfdConfig { m: 4, sigma: 3.0 }),
                ..paper.baselines.clone()
            },
            out_dir: PathBuf::from("gust-desk"),
            ..paper
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Profile defaults overlaid with the tables of a TOML file.
    pub fn load(path: &Path, profile: Profile) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, profile)
    }

    pub fn from_toml_str(text: &str, profile: Profile) -> Result<Self, PipelineError> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        let base = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| PipelineError::Config(e.to_string()))?;
        let merged = merge(base, overlay);
        merged.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("out_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.denoiser.validate().map_err(PipelineError::Config)?;
        self.denoiser
            .check_resolution(self.resolution, self.resolution)
            .map_err(PipelineError::Config)?;
        if let Some(dir) = &self.nominals_dir {
            if !dir.is_dir() {
                return bad(format!("nominals_dir {} does not exist", dir.display()));
            }
        }
        for (name, d) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if d.nominals == 0 || d.variants == 0 {
                return bad(format!("{name} needs at least one nominal and one variant"));
            }
            d.pipeline.validate().map_err(|e| PipelineError::Config(format!("{name}: {e}")))?;
        }
        self.baselines
            .augment_pipeline
            .validate()
            .map_err(|e| PipelineError::Config(format!("augment: {e}")))?;
        if self.eval.nominals == 0 || self.eval.samples == 0 || self.eval.truth_variants <= self.metrics.k {
            return bad(format!("eval needs designs, samples and more than k = {} truth variants", self.metrics.k));
        }
        self.schedule.build().map_err(|e| PipelineError::Config(e.to_string()))?;
        for t in [&self.pretrain_train, &self.finetune_train, &self.baselines.direct_train] {
            t.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        self.freeze
            .validate(self.denoiser.levels)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.baselines.grf.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.material.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.void_ratio > 0.0 && self.void_ratio < 1.0) {
            return bad(format!("void_ratio {} outside (0, 1)", self.void_ratio));
        }
        if self.metrics.k == 0 || !(self.metrics.perplexity > 0.0) {
            return bad("metric k and perplexity must be positive".into());
        }
        Ok(())
    }
}

fn merge(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (k, v) in overlay {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for p in [Profile::Paper, Profile::Desk] {
            let cfg = ExperimentConfig::for_profile(p);
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), p).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        assert_ne!(ExperimentConfig::paper().hash(), ExperimentConfig::desk().hash());
    }

    #[test]
    fn committed_defaults_match() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (file, p) in [("paper.toml", Profile::Paper), ("desk.toml", Profile::Desk)] {
            let cfg = ExperimentConfig::load(&root.join(file), p).unwrap();
            assert_eq!(cfg, ExperimentConfig::for_profile(p), "{file}");
            let other = if p == Profile::Paper { Profile::Desk } else { Profile::Paper };
            assert_eq!(ExperimentConfig::load(&root.join(file), other).unwrap(), cfg, "{file} is complete");
        }
    }

    #[test]
    fn partial_overlay_and_key_order() {
        let a = ExperimentConfig::from_toml_str("seed = 5\n[eval]\nsamples = 7\nnominals = 2\n", Profile::Desk).unwrap();
        let b = ExperimentConfig::from_toml_str("[eval]\nnominals = 2\nsamples = 7\n\n", Profile::Desk)
            .map(|mut c| {
                c.seed = 5;
                c
            })
            .unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.eval.truth_variants, 500);
        let moved = ExperimentConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(moved.hash(), a.hash());
        assert!(ExperimentConfig::from_toml_str("resolution = \"big\"", Profile::Desk).is_err());
        let bad = ExperimentConfig { resolution: 30, ..ExperimentConfig::desk() };
        assert!(bad.validate().is_err());
    }
}
