use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::load_dataset;
use super::PipelineError;
use crate::diffusion::Checkpoint;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Pretrain,
    Finetune,
    Sample,
    Baseline,
    Homogenize,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Sample,
        Stage::Baseline,
        Stage::Homogenize,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Sample => "sample",
            Stage::Baseline => "baseline",
            Stage::Homogenize => "homogenize",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::Pretrain => &[Stage::Synth],
            Stage::Finetune => &[Stage::Pretrain],
            Stage::Sample => &[Stage::Finetune],
            Stage::Baseline => &[Stage::Synth],
            Stage::Homogenize => &[Stage::Sample, Stage::Baseline],
            Stage::Evaluate => &[Stage::Homogenize],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    /// The manifest in `out_dir`, or an empty one.
    pub fn load(out_dir: &Path) -> Result<Self, PipelineError> {
        let path = out_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join(MANIFEST_FILE), self.to_json())?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.to_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.contains_key(&stage)
    }

    /// Checks that every recorded output exists and parses as its format.
    pub fn validate(&self, out_dir: &Path) -> Result<(), PipelineError> {
        for rec in self.stages.values() {
            for rel in &rec.outputs {
                validate_artifact(&out_dir.join(rel))?;
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_artifact(path: &Path) -> Result<(), PipelineError> {
    let bad = |e: String| PipelineError::Format(format!("{}: {e}", path.display()));
    match path.extension().and_then(|e| e.to_str()) {
        Some("gust") => load_dataset(path).and_then(|d| d.validate().map_err(PipelineError::from)).map(|_| ()),
        Some("gckp") => Checkpoint::load(path).map(|_| ()).map_err(|e| bad(e.to_string())),
        Some("csv") => {
            let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
            for rec in rdr.records() {
                rec.map_err(|e| bad(e.to_string()))?;
            }
            Ok(())
        }
        Some("json") => {
            serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(path)?).map_err(|e| bad(e.to_string()))?;
            Ok(())
        }
        Some("svg") => {
            if std::fs::read_to_string(path)?.starts_with("<svg") {
                Ok(())
            } else {
                Err(bad("not an SVG document".into()))
            }
        }
        _ => {
            if path.exists() {
                Ok(())
            } else {
                Err(bad("missing".into()))
            }
        }
    }
}
