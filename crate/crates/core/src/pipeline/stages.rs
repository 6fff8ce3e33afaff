use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::io::{import_cells, load_dataset, read_property_csv, save_dataset};
use super::manifest::{validate_artifact, RunManifest, Stage, StageRecord};
use super::nominals::gen_nominals;
use super::PipelineError;
use crate::baselines::{augment_dataset, fit_morph_scales, GrfSampler};
use crate::diffusion::{finetune, pretrain, sample, Checkpoint, TrainConfig, TrainOutcome};
use crate::geometry::{dilate, erode, BinaryCell};
use crate::homogenize::{format_sig9, property_table, save_property_csv, COMPONENT_NAMES};
use crate::metrics::{coverage, density, embed, wasserstein1, EmbeddingKind, MetricConfig};
use crate::perturb::{build_dataset, PairedDataset, Record, Role};
use crate::rng::{derive_seed, stream};

/// Generated-geometry methods in report order. Each has a sample file
/// `samples/<name>.gust` once its stage ran.
pub const METHODS: [&str; 6] = ["gust", "dt", "dt_aug", "grf", "dilation", "erosion"];

const PRETRAIN_DATA: &str = "data/pretrain.gust";
const FINETUNE_DATA: &str = "data/finetune.gust";
const EVAL_TRUTH: &str = "data/eval_truth.gust";
const PRETRAIN_CKPT: &str = "models/pretrain.gckp";
const FINETUNE_CKPT: &str = "models/finetune.gckp";
const RAW_METRICS: &str = "metrics/raw.csv";

fn samples_path(method: &str) -> String {
    format!("samples/{method}.gust")
}

fn properties_path(name: &str) -> String {
    format!("properties/{name}.csv")
}

fn stage_seed(cfg: &ExperimentConfig, stage: Stage) -> u64 {
    derive_seed(cfg.seed, &[stage as u64])
}

/// Runs one stage and records it in the manifest saved under `cfg.out_dir`.
/// A stage already recorded for the same config hash, with all of its
/// outputs present, is skipped.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, manifest: RunManifest) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let hash = cfg.hash();
    if !manifest.config_hash.is_empty() && manifest.config_hash != hash {
        return Err(PipelineError::ConfigMismatch {
            expected: hash,
            found: manifest.config_hash,
        });
    }
    let out = cfg.out_dir.as_path();
    if let Some(rec) = manifest.stages.get(&stage) {
        if rec.outputs.iter().all(|p| validate_artifact(&out.join(p)).is_ok()) {
            log::info!("stage {stage} already complete");
            return Ok(manifest);
        }
    }
    for dep in stage.dependencies() {
        if !manifest.is_complete(*dep) {
            return Err(PipelineError::MissingDependency { stage, missing: *dep });
        }
    }
    log::info!("running stage {stage}");
    let start = Instant::now();
    let seed = stage_seed(cfg, stage);
    let outputs = match stage {
        Stage::Synth => synth(cfg, seed)?,
        Stage::Pretrain => run_pretrain(cfg, seed)?,
        Stage::Finetune => run_finetune(cfg, seed)?,
        Stage::Sample => run_sample(cfg, seed)?,
        Stage::Baseline => run_baseline(cfg, seed)?,
        Stage::Homogenize => run_homogenize(cfg, &manifest)?,
        Stage::Evaluate => run_evaluate(cfg, &manifest, seed)?,
    };
    let mut manifest = manifest;
    manifest.config_hash = hash;
    manifest.seed = cfg.seed;
    manifest.stages.insert(
        stage,
        StageRecord {
            outputs,
            wall_clock_s: start.elapsed().as_secs_f64(),
            seed,
        },
    );
    manifest.save(out)?;
    Ok(manifest)
}

/// Runs every stage in dependency order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<RunManifest, PipelineError> {
    let mut manifest = RunManifest::load(&cfg.out_dir)?;
    for stage in Stage::ALL {
        manifest = run_stage(stage, cfg, manifest)?;
    }
    Ok(manifest)
}

fn prepare(out: &Path, rel: &str) -> Result<std::path::PathBuf, PipelineError> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn synth(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<String>, PipelineError> {
    let out = cfg.out_dir.as_path();
    let total = cfg.pretrain.nominals + cfg.finetune.nominals + cfg.eval.nominals;
    let nominals: Vec<BinaryCell> = match &cfg.nominals_dir {
        Some(dir) => {
            let cells = import_cells(dir, cfg.import_threshold, cfg.resolution)?;
            if cells.len() < total {
                return Err(PipelineError::Config(format!(
                    "{} holds {} designs, the config needs {total}",
                    dir.display(),
                    cells.len()
                )));
            }
            cells.into_iter().take(total).map(|(_, c)| c).collect()
        }
        None => gen_nominals(total, cfg.resolution, cfg.family, derive_seed(seed, &[0]))?,
    };
    let (pre, rest) = nominals.split_at(cfg.pretrain.nominals);
    let (fine, eval) = rest.split_at(cfg.finetune.nominals);
    let jobs = [
        (PRETRAIN_DATA, pre, &cfg.pretrain.pipeline, cfg.pretrain.variants),
        (FINETUNE_DATA, fine, &cfg.finetune.pipeline, cfg.finetune.variants),
        (EVAL_TRUTH, eval, &cfg.finetune.pipeline, cfg.eval.truth_variants),
    ];
    let mut outputs = Vec::new();
    for (k, (rel, noms, pipe, variants)) in jobs.into_iter().enumerate() {
        let ds = build_dataset(noms, pipe, variants, derive_seed(seed, &[1, k as u64]))?;
        save_dataset(&ds, &prepare(out, rel)?)?;
        outputs.push(rel.to_string());
    }
    Ok(outputs)
}

fn seeded(t: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..t.clone() }
}

fn save_training(out: &Path, rel: &str, outcome: &TrainOutcome) -> Result<Vec<String>, PipelineError> {
    outcome.checkpoint.save(&prepare(out, rel)?)?;
    let loss_rel = rel.replace(".gckp", "_loss.csv");
    let mut w = csv::Writer::from_path(prepare(out, &loss_rel)?).map_err(|e| PipelineError::Format(e.to_string()))?;
    w.write_record(["iteration", "loss"]).map_err(|e| PipelineError::Format(e.to_string()))?;
    for (i, l) in outcome.losses.iter().enumerate() {
        w.write_record([i.to_string(), format_sig9(*l)]).map_err(|e| PipelineError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(vec![rel.to_string(), loss_rel])
}

fn run_pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<String>, PipelineError> {
    let out = cfg.out_dir.as_path();
    let ds = load_dataset(&out.join(PRETRAIN_DATA))?;
    let schedule = cfg.schedule.build()?;
    let outcome = pretrain(&ds, &schedule, &cfg.denoiser, &seeded(&cfg.pretrain_train, seed))?;
    save_training(out, PRETRAIN_CKPT, &outcome)
}

fn run_finetune(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<String>, PipelineError> {
    let out = cfg.out_dir.as_path();
    let ds = load_dataset(&out.join(FINETUNE_DATA))?;
    let ckpt = Checkpoint::load(&out.join(PRETRAIN_CKPT))?;
    let outcome = finetune(&ckpt, &ds, &cfg.freeze, &seeded(&cfg.finetune_train, seed))?;
    save_training(out, FINETUNE_CKPT, &outcome)
}

/// Eval nominals with their ids, in id order.
fn eval_nominals(out: &Path) -> Result<Vec<(u32, BinaryCell)>, PipelineError> {
    let truth = load_dataset(&out.join(EVAL_TRUTH))?;
    Ok(truth.nominals().map(|(id, c)| (id, c.clone())).collect())
}

fn write_samples(out: &Path, method: &str, sets: Vec<(u32, BinaryCell, Vec<BinaryCell>)>) -> Result<String, PipelineError> {
    let mut records = Vec::new();
    for (id, nominal, cells) in sets {
        records.push(Record {
            nominal_id: id,
            role: Role::Nominal,
            cell: nominal,
        });
        records.extend(cells.into_iter().map(|cell| Record {
            nominal_id: id,
            role: Role::Fabricated,
            cell,
        }));
    }
    let rel = samples_path(method);
    save_dataset(&PairedDataset::new(records)?, &prepare(out, &rel)?)?;
    Ok(rel)
}

fn sample_checkpoint(out: &Path, method: &str, ckpt: &Checkpoint, count: usize, seed: u64) -> Result<String, PipelineError> {
    let mut sets = Vec::new();
    for (id, nom) in eval_nominals(out)? {
        let cells = sample(ckpt, &nom, count, derive_seed(seed, &[id as u64]))?;
        sets.push((id, nom, cells));
    }
    write_samples(out, method, sets)
}

fn run_sample(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<String>, PipelineError> {
    let out = cfg.out_dir.as_path();
    let ckpt = Checkpoint::load(&out.join(FINETUNE_CKPT))?;
    Ok(vec![sample_checkpoint(out, "gust", &ckpt, cfg.eval.samples, seed)?])
}

fn run_baseline(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<String>, PipelineError> {
    let out = cfg.out_dir.as_path();
    let fine = load_dataset(&out.join(FINETUNE_DATA))?;
    let schedule = cfg.schedule.build()?;
    let mut outputs = Vec::new();

    let direct = pretrain(&fine, &schedule, &cfg.denoiser, &seeded(&cfg.baselines.direct_train, derive_seed(seed, &[0])))?;
    outputs.extend(save_training(out, "models/direct.gckp", &direct)?);
    outputs.push(sample_checkpoint(out, "dt", &direct.checkpoint, cfg.eval.samples, derive_seed(seed, &[1]))?);

    if cfg.baselines.augment_factor > 0 {
        let aug = augment_dataset(&fine, &cfg.baselines.augment_pipeline, cfg.baselines.augment_factor, derive_seed(seed, &[2]))?;
        let trained = pretrain(&aug, &schedule, &cfg.denoiser, &seeded(&cfg.baselines.direct_train, derive_seed(seed, &[3])))?;
        outputs.extend(save_training(out, "models/direct_aug.gckp", &trained)?);
        outputs.push(sample_checkpoint(out, "dt_aug", &trained.checkpoint, cfg.eval.samples, derive_seed(seed, &[4]))?);
    }

    let grf = GrfSampler::new(cfg.baselines.grf)?;
    let grf_seed = derive_seed(seed, &[5]);
    let sets = eval_nominals(out)?
        .into_iter()
        .map(|(id, nom)| {
            let cells = (0..cfg.eval.samples)
                .map(|k| grf.perturb(&nom, &mut stream(grf_seed, &[id as u64, k as u64])))
                .collect();
            (id, nom, cells)
        })
        .collect();
    outputs.push(write_samples(out, "grf", sets)?);

    let noms: Vec<BinaryCell> = fine.nominals().map(|(_, c)| c.clone()).collect();
    let fabs: Vec<BinaryCell> = fine
        .records
        .iter()
        .filter(|r| r.role == Role::Fabricated)
        .map(|r| r.cell.clone())
        .collect();
    let mut morph_cfg = cfg.baselines.morph;
    morph_cfg.de.seed = derive_seed(seed, &[6]);
    let fit = fit_morph_scales(&noms, &fabs, &morph_cfg)?;
    let fit_rel = "baselines/morph_fit.json";
    std::fs::write(prepare(out, fit_rel)?, serde_json::to_string_pretty(&fit).expect("serializable"))?;
    outputs.push(fit_rel.to_string());
    for (method, op, scale) in [
        ("dilation", dilate as fn(&BinaryCell, _) -> BinaryCell, fit.dilation),
        ("erosion", erode, fit.erosion),
    ] {
        let sets = eval_nominals(out)?
            .into_iter()
            .map(|(id, nom)| {
                let cell = op(&nom, scale);
                (id, nom, vec![cell])
            })
            .collect();
        outputs.push(write_samples(out, method, sets)?);
    }
    Ok(outputs)
}

/// Fabricated cells of a sample or truth file, grouped by nominal id.
fn grouped(ds: &PairedDataset) -> BTreeMap<u32, Vec<BinaryCell>> {
    let mut map: BTreeMap<u32, Vec<BinaryCell>> = BTreeMap::new();
    for (id, _) in ds.nominals() {
        map.insert(id, ds.fabricated_of(id).cloned().collect());
    }
    map
}

fn available_methods(out: &Path) -> Vec<&'static str> {
    METHODS.into_iter().filter(|m| out.join(samples_path(m)).exists()).collect()
}

fn run_homogenize(cfg: &ExperimentConfig, _manifest: &RunManifest) -> Result<Vec<String>, PipelineError> {
    let out = cfg.out_dir.as_path();
    let mut sources = vec![("truth", EVAL_TRUTH.to_string())];
    sources.extend(available_methods(out).into_iter().map(|m| (m, samples_path(m))));
    let mut outputs = Vec::new();
    for (name, rel) in sources {
        let ds = load_dataset(&out.join(rel))?;
        let cells: Vec<(String, BinaryCell)> = grouped(&ds)
            .into_iter()
            .flat_map(|(id, cells)| cells.into_iter().enumerate().map(move |(k, c)| (format!("{id}:{k}"), c)))
            .collect();
        let rows = property_table(&cells, &cfg.material, cfg.void_ratio)?;
        let failed = rows.iter().filter(|r| r.tensor.is_none()).count();
        if failed > 0 {
            log::warn!("{failed} of {} {name} cells failed to homogenize", rows.len());
        }
        let rel = properties_path(name);
        save_property_csv(&rows, &prepare(out, &rel)?)?;
        outputs.push(rel);
    }
    Ok(outputs)
}

/// One row of `metrics/raw.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub design: u32,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
}

/// Per-design component samples of a property table, failed rows dropped.
fn property_samples(path: &Path) -> Result<BTreeMap<u32, [Vec<f64>; 4]>, PipelineError> {
    let mut map: BTreeMap<u32, [Vec<f64>; 4]> = BTreeMap::new();
    for row in read_property_csv(path)? {
        let id: u32 = row
            .id
            .split(':')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PipelineError::Format(format!("bad property id {}", row.id)))?;
        let entry = map.entry(id).or_default();
        if let Some(t) = row.tensor {
            for (k, v) in t.components().into_iter().enumerate() {
                entry[k].push(v);
            }
        }
    }
    Ok(map)
}

/// The metric configuration used for one design and method: t-SNE
/// perplexity is capped below a third of the point count.
fn metric_config_for(cfg: &MetricConfig, points: usize, seed: u64) -> MetricConfig {
    let mut m = *cfg;
    m.seed = seed;
    if m.embedding == EmbeddingKind::Tsne {
        let cap = (points as f64 - 1.0) / 3.0 - 1.0;
        if m.perplexity >= cap {
            log::warn!("perplexity {} capped to {cap} for {points} points", m.perplexity);
            m.perplexity = cap.max(1.0);
        }
    }
    m
}

fn run_evaluate(cfg: &ExperimentConfig, _manifest: &RunManifest, seed: u64) -> Result<Vec<String>, PipelineError> {
    let out = cfg.out_dir.as_path();
    let hash = cfg.hash();
    let truth = grouped(&load_dataset(&out.join(EVAL_TRUTH))?);
    let truth_props = property_samples(&out.join(properties_path("truth")))?;
    let mut rows = Vec::new();
    for (mi, method) in available_methods(out).into_iter().enumerate() {
        let gen = grouped(&load_dataset(&out.join(samples_path(method)))?);
        let gen_props = property_samples(&out.join(properties_path(method)))?;
        for (&design, real) in &truth {
            let Some(cells) = gen.get(&design) else {
                continue;
            };
            let mcfg = metric_config_for(&cfg.metrics, real.len() + cells.len(), derive_seed(seed, &[design as u64, mi as u64]));
            let (er, eg) = embed(real, cells, &mcfg)?;
            let mut push = |metric: String, value: f64| {
                rows.push(MetricRecord {
                    design,
                    method: method.to_string(),
                    metric,
                    value,
                    config_hash: hash.clone(),
                })
            };
            push("density".into(), density(&er.points, &eg.points, cfg.metrics.k)?);
            push("coverage".into(), coverage(&er.points, &eg.points, cfg.metrics.k)?);
            let empty: [Vec<f64>; 4] = Default::default();
            let tp = truth_props.get(&design).unwrap_or(&empty);
            let gp = gen_props.get(&design).unwrap_or(&empty);
            for (k, name) in COMPONENT_NAMES.iter().enumerate() {
                let w = if tp[k].is_empty() || gp[k].is_empty() {
                    f64::NAN
                } else {
                    wasserstein1(&tp[k], &gp[k])?
                };
                push(format!("w1_{name}"), w);
            }
        }
    }
    let path = prepare(out, RAW_METRICS)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Format(e.to_string()))?;
    w.write_record(["design", "method", "metric", "value", "config_hash"])
        .map_err(|e| PipelineError::Format(e.to_string()))?;
    for r in &rows {
        w.write_record([r.design.to_string(), r.method.clone(), r.metric.clone(), format_sig9(r.value), r.config_hash.clone()])
            .map_err(|e| PipelineError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(vec![RAW_METRICS.to_string()])
}

pub fn read_raw_metrics(out_dir: &Path) -> Result<Vec<MetricRecord>, PipelineError> {
    let mut rdr = csv::Reader::from_path(out_dir.join(RAW_METRICS)).map_err(|e| PipelineError::Format(e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e: csv::Error| PipelineError::Format(e.to_string())))
        .collect()
}
