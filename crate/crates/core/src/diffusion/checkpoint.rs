use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::nn::TableSource;
use super::schedule::{NoiseSchedule, ScheduleSpec};
use super::unet::{Denoiser, DenoiserConfig};
use super::DiffusionError;

const MAGIC: &[u8; 4] = b"GCKP";
const VERSION: u32 = 1;

/// A named parameter tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserConfig,
    /// Optimizer steps taken so far, summed over pretraining and fine-tuning.
    pub iterations: u64,
    pub seed: u64,
    pub config_hash: String,
}

/// Network parameters plus everything needed to rebuild the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, ParamTensor>,
    pub meta: CheckpointMeta,
}

fn format_err(msg: impl Into<String>) -> DiffusionError {
    DiffusionError::Format(msg.into())
}

impl Checkpoint {
    pub fn from_denoiser(model: &Denoiser, schedule: ScheduleSpec, iterations: u64, seed: u64, config_hash: String) -> Result<Self, DiffusionError> {
        Ok(Self {
            tensors: model.export()?,
            meta: CheckpointMeta {
                schedule,
                denoiser: model.config().clone(),
                iterations,
                seed,
                config_hash,
            },
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        self.meta.schedule.build()
    }

    /// Rebuilds the network at the requested precision.
    pub fn denoiser(&self, dtype: DType) -> Result<Denoiser, DiffusionError> {
        let mut source = TableSource {
            table: &self.tensors,
            dtype,
        };
        let model = Denoiser::build(&self.meta.denoiser, &mut source, dtype)?;
        if model.vars().len() != self.tensors.len() {
            return Err(format_err(format!(
                "checkpoint has {} tensors, config expects {}",
                self.tensors.len(),
                model.vars().len()
            )));
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.values.len()).sum()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), DiffusionError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
            for &d in &t.shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in &t.values {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        let meta = serde_json::to_vec(&self.meta).map_err(|e| format_err(e.to_string()))?;
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, DiffusionError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(format_err("not a checkpoint file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let count = r.read_u32::<LittleEndian>()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| format_err("tensor name is not UTF-8"))?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut values = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut values)?;
            if tensors.insert(name.clone(), ParamTensor { shape, values }).is_some() {
                return Err(format_err(format!("duplicate tensor {name}")));
            }
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut meta = vec![0u8; len];
        r.read_exact(&mut meta)?;
        let meta = serde_json::from_slice(&meta).map_err(|e| format_err(e.to_string()))?;
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
