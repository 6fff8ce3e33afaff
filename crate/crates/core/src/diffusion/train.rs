use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::nn::RandomInit;
use super::schedule::NoiseSchedule;
use super::unet::{stack_grids, Denoiser, DenoiserConfig};
use super::DiffusionError;
use crate::geometry::BinaryCell;
use crate::perturb::PairedDataset;
use crate::rng::{standard_normal, stream};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean absolute error.
    L1,
    /// Mean squared error.
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Multiplier applied to the learning rate every `decay_every` iterations.
    pub decay_factor: f64,
    pub decay_every: u64,
    pub lr_floor: f64,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper_pretrain() -> Self {
        Self {
            iterations: 180_000,
            batch_size: 64,
            initial_lr: 8e-4,
            decay_factor: 0.9,
            decay_every: 5_000,
            lr_floor: 1e-6,
            loss_kind: LossKind::L1,
            seed: 0,
        }
    }

    pub fn paper_finetune() -> Self {
        Self {
            iterations: 38_400,
            decay_every: 960,
            ..Self::paper_pretrain()
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let ok = self.batch_size > 0
            && self.initial_lr > 0.0
            && self.decay_factor > 0.0
            && self.decay_factor <= 1.0
            && self.decay_every > 0
            && self.lr_floor > 0.0
            && self.lr_floor <= self.initial_lr;
        if ok {
            Ok(())
        } else {
            Err(DiffusionError::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }

    /// Step-decay schedule, floored.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let steps = (iteration / self.decay_every) as i32;
        (self.initial_lr * self.decay_factor.powi(steps)).max(self.lr_floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Attention,
    ConditionalNorm,
    AllInBlock,
    Bottleneck,
    /// Every parameter of the network.
    All,
}

/// Which parameters stay fixed during fine-tuning.
///
/// Block index `k` addresses the symmetric pair `down.k` / `up.k`.
/// `Attention` and `ConditionalNorm` apply to the listed blocks, or to every
/// block when none is listed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub frozen_blocks: BTreeSet<usize>,
    pub frozen_layer_kinds: BTreeSet<LayerKind>,
}

impl FreezeSpec {
    pub fn nothing() -> Self {
        Self::default()
    }

    pub fn everything() -> Self {
        Self {
            frozen_blocks: BTreeSet::new(),
            frozen_layer_kinds: [LayerKind::All].into(),
        }
    }

    pub fn blocks(indices: &[usize]) -> Self {
        Self {
            frozen_blocks: indices.iter().copied().collect(),
            frozen_layer_kinds: [LayerKind::AllInBlock].into(),
        }
    }

    pub fn bottleneck() -> Self {
        Self {
            frozen_blocks: BTreeSet::new(),
            frozen_layer_kinds: [LayerKind::Bottleneck].into(),
        }
    }

    /// The five transfer configurations compared in the appendix table,
    /// for a network of `levels` blocks.
    pub fn appendix_rows(levels: usize) -> Vec<(String, FreezeSpec)> {
        let mut rows: Vec<(String, FreezeSpec)> = [(0, "1st & last residual blocks"), (1, "2nd & the 2nd last blocks"), (3, "4th & the 4th last blocks"), (4, "5th & the 5th last blocks")]
            .into_iter()
            .filter(|(k, _)| *k < levels)
            .map(|(k, label)| (label.to_string(), FreezeSpec::blocks(&[k])))
            .collect();
        rows.push(("MLP layers".into(), FreezeSpec::bottleneck()));
        rows
    }

    pub fn validate(&self, levels: usize) -> Result<(), DiffusionError> {
        match self.frozen_blocks.iter().find(|&&k| k >= levels) {
            Some(&index) => Err(DiffusionError::UnknownBlockIndex { index, levels }),
            None => Ok(()),
        }
    }

    /// Whether the parameter called `name` is frozen.
    pub fn is_frozen(&self, name: &str) -> bool {
        let kinds = &self.frozen_layer_kinds;
        if kinds.contains(&LayerKind::All) {
            return true;
        }
        if kinds.contains(&LayerKind::Bottleneck) && name.starts_with("mid.") {
            return true;
        }
        let block = block_index(name);
        let in_scope = match block {
            Some(k) => self.frozen_blocks.is_empty() || self.frozen_blocks.contains(&k),
            None => false,
        };
        if !in_scope {
            return false;
        }
        if kinds.contains(&LayerKind::AllInBlock) && block.is_some_and(|k| self.frozen_blocks.contains(&k)) {
            return true;
        }
        (kinds.contains(&LayerKind::Attention) && name.contains(".attn."))
            || (kinds.contains(&LayerKind::ConditionalNorm) && (name.contains(".norm1.") || name.contains(".norm2.")))
    }
}

fn block_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("down.").or_else(|| name.strip_prefix("up."))?;
    rest.split('.').next()?.parse().ok()
}

/// One training minibatch: clean targets, nominals, timesteps and noise.
pub struct Batch {
    pub x0: Tensor,
    pub nominal: Tensor,
    pub timesteps: Vec<usize>,
    pub eps: Tensor,
}

/// Loss of the noise prediction on a batch, following the closed-form forward draw.
pub fn batch_loss(model: &Denoiser, schedule: &NoiseSchedule, batch: &Batch, kind: LossKind) -> Result<Tensor, DiffusionError> {
    let b = batch.timesteps.len();
    let dtype = model.dtype();
    let (a, s): (Vec<f64>, Vec<f64>) = batch
        .timesteps
        .iter()
        .map(|&t| {
            let ab = schedule.alpha_bar(t);
            (ab.sqrt(), (1.0 - ab).sqrt())
        })
        .unzip();
    let a = Tensor::from_vec(a, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let s = Tensor::from_vec(s, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let x_t = (batch.x0.broadcast_mul(&a)? + batch.eps.broadcast_mul(&s)?)?;
    let ts: Vec<f64> = batch.timesteps.iter().map(|&t| t as f64).collect();
    let eps_hat = model.forward(&x_t, &ts, &batch.nominal)?;
    let diff = (eps_hat - &batch.eps)?;
    let loss = match kind {
        LossKind::L1 => diff.abs()?.mean_all()?,
        LossKind::L2 => diff.sqr()?.mean_all()?,
    };
    Ok(loss)
}

struct Adam {
    params: Vec<(Var, Tensor, Tensor)>,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(vars: Vec<Var>) -> Result<Self, DiffusionError> {
        let params = vars
            .into_iter()
            .map(|v| {
                let z = v.zeros_like()?;
                Ok((v, z.clone(), z))
            })
            .collect::<Result<Vec<_>, candle_core::Error>>()?;
        Ok(Self { params, step: 0 })
    }

    fn step(&mut self, loss: &Tensor, lr: f64) -> Result<(), DiffusionError> {
        let grads = loss.backward()?;
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (var, m, v) in &mut self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            *m = (m.affine(BETA1, 0.0)? + g.affine(1.0 - BETA1, 0.0)?)?;
            *v = (v.affine(BETA2, 0.0)? + g.sqr()?.affine(1.0 - BETA2, 0.0)?)?;
            let denom = (v.affine(1.0 / c2, 0.0)?.sqrt()? + ADAM_EPS)?;
            let update = (m.affine(lr / c1, 0.0)? / denom)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
        }
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Minibatch loss per iteration.
    pub losses: Vec<f64>,
}

fn signal_f32(cell: &BinaryCell) -> Vec<f32> {
    cell.values().iter().map(|&v| if v != 0 { 1.0 } else { -1.0 }).collect()
}

fn training_pairs(dataset: &PairedDataset, dcfg: &DenoiserConfig) -> Result<(Vec<(Vec<f32>, Vec<f32>)>, usize, usize), DiffusionError> {
    let pairs = dataset.pairs();
    if pairs.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let (h, w) = dataset.resolution().expect("non-empty dataset");
    dcfg.check_resolution(h, w).map_err(DiffusionError::ShapeMismatch)?;
    let pairs = pairs.into_iter().map(|(n, f)| (signal_f32(n), signal_f32(f))).collect();
    Ok((pairs, h, w))
}

fn config_hash(dcfg: &DenoiserConfig, schedule: &NoiseSchedule, tcfg: &TrainConfig, prior: &str) -> String {
    let json = serde_json::json!({
        "denoiser": dcfg,
        "schedule": schedule.spec(),
        "train": tcfg,
        "prior": prior,
    });
    let digest = Sha256::digest(json.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn run(
    model: &Denoiser,
    trainable: Vec<Var>,
    schedule: &NoiseSchedule,
    pairs: &[(Vec<f32>, Vec<f32>)],
    (h, w): (usize, usize),
    tcfg: &TrainConfig,
) -> Result<Vec<f64>, DiffusionError> {
    let mut adam = Adam::new(trainable)?;
    let mut rng = stream(tcfg.seed, &[1]);
    let mut losses = Vec::with_capacity(tcfg.iterations as usize);
    let bs = tcfg.batch_size;
    let dtype = model.dtype();
    for it in 0..tcfg.iterations {
        let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..pairs.len())).collect();
        let timesteps: Vec<usize> = (0..bs).map(|_| rng.random_range(1..=schedule.timesteps())).collect();
        let eps: Vec<f32> = (0..bs * h * w).map(|_| standard_normal(&mut rng) as f32).collect();
        let noms: Vec<&[f32]> = idx.iter().map(|&i| pairs[i].0.as_slice()).collect();
        let fabs: Vec<&[f32]> = idx.iter().map(|&i| pairs[i].1.as_slice()).collect();
        let batch = Batch {
            x0: stack_grids(&fabs, h, w, dtype)?,
            nominal: stack_grids(&noms, h, w, dtype)?,
            timesteps,
            eps: Tensor::from_vec(eps, (bs, 1, h, w), &Device::Cpu)?.to_dtype(dtype)?,
        };
        let loss = batch_loss(model, schedule, &batch, tcfg.loss_kind)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let lr = tcfg.lr_at(it);
        if !value.is_finite() {
            return Err(DiffusionError::NonFiniteLoss { iteration: it, lr });
        }
        losses.push(value);
        adam.step(&loss, lr)?;
        if (it + 1) % 500 == 0 {
            let tail = &losses[losses.len().saturating_sub(100)..];
            log::info!("iteration {} lr {lr:.2e} loss(avg100) {:.4}", it + 1, tail.iter().sum::<f64>() / tail.len() as f64);
        }
    }
    Ok(losses)
}

/// Trains a freshly initialized denoiser on `(nominal, fabricated)` pairs.
pub fn pretrain(
    dataset: &PairedDataset,
    schedule: &NoiseSchedule,
    dcfg: &DenoiserConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome, DiffusionError> {
    tcfg.validate()?;
    dcfg.validate().map_err(DiffusionError::InvalidConfig)?;
    let (pairs, h, w) = training_pairs(dataset, dcfg)?;
    let model = Denoiser::build(dcfg, &mut RandomInit::new(stream(tcfg.seed, &[0]), DType::F32), DType::F32)?;
    let trainable = model.vars().values().cloned().collect();
    let losses = run(&model, trainable, schedule, &pairs, (h, w), tcfg)?;
    let hash = config_hash(dcfg, schedule, tcfg, "");
    let checkpoint = Checkpoint::from_denoiser(&model, schedule.spec(), tcfg.iterations, tcfg.seed, hash)?;
    Ok(TrainOutcome { checkpoint, losses })
}

/// Continues training from `ckpt` with the parameters selected by `freeze` held fixed.
pub fn finetune(
    ckpt: &Checkpoint,
    dataset: &PairedDataset,
    freeze: &FreezeSpec,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome, DiffusionError> {
    tcfg.validate()?;
    let dcfg = &ckpt.meta.denoiser;
    freeze.validate(dcfg.levels)?;
    let (pairs, h, w) = training_pairs(dataset, dcfg)?;
    let schedule = ckpt.schedule()?;
    let model = ckpt.denoiser(DType::F32)?;
    let trainable: Vec<Var> = model
        .vars()
        .iter()
        .filter(|(name, _)| !freeze.is_frozen(name))
        .map(|(_, v)| v.clone())
        .collect();
    let losses = run(&model, trainable, &schedule, &pairs, (h, w), tcfg)?;
    let hash = config_hash(dcfg, &schedule, tcfg, &ckpt.meta.config_hash);
    let checkpoint = Checkpoint::from_denoiser(
        &model,
        schedule.spec(),
        ckpt.meta.iterations + tcfg.iterations,
        tcfg.seed,
        hash,
    )?;
    Ok(TrainOutcome { checkpoint, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::ScheduleSpec;
    use crate::perturb::{build_dataset, FfdConfig, PerturbPipeline};
    use crate::rng::rng_from_seed;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            levels: 2,
            base_channels: 4,
            channel_mults: vec![1, 1],
            attention_levels: vec![1],
            time_embed_dim: 4,
            cond_hidden: 2,
            norm_groups: 2,
            bottleneck_width: 4,
        }
    }

    fn tiny_data() -> PairedDataset {
        let nom = BinaryCell::from_fn(8, 8, |r, c| (2..6).contains(&r) || c == 3).unwrap();
        build_dataset(&[nom], &PerturbPipeline::pretrain(FfdConfig { m: 3, sigma: 1.0 }), 4, 2).unwrap()
    }

    fn quick(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 4,
            initial_lr: 1e-3,
            decay_factor: 0.9,
            decay_every: 10,
            lr_floor: 1e-6,
            loss_kind: LossKind::L1,
            seed: 5,
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let t = TrainConfig::paper_pretrain();
        assert_eq!(t.lr_at(0), 8e-4);
        assert_eq!(t.lr_at(4_999), 8e-4);
        assert!((t.lr_at(5_000) - 7.2e-4).abs() < 1e-15);
        assert_eq!(t.lr_at(175_000), 1e-6f64.max(8e-4 * 0.9f64.powi(35)));
        let f = TrainConfig::paper_finetune();
        assert_eq!((f.iterations, f.decay_every, f.batch_size), (38_400, 960, 64));
        let mut far = t.clone();
        far.decay_factor = 0.1;
        assert_eq!(far.lr_at(100_000), 1e-6);
    }

    #[test]
    fn freeze_selection() {
        let f = FreezeSpec::blocks(&[0]);
        assert!(f.is_frozen("down.0.conv1.weight"));
        assert!(f.is_frozen("up.0.norm1.gamma.bias"));
        assert!(f.is_frozen("down.0.downsample.weight"));
        assert!(!f.is_frozen("down.1.conv1.weight"));
        assert!(!f.is_frozen("input.conv.weight"));
        assert!(!f.is_frozen("mid.mlp.fc1.weight"));
        assert!(FreezeSpec::bottleneck().is_frozen("mid.mlp.fc2.bias"));
        let attn = FreezeSpec {
            frozen_blocks: BTreeSet::new(),
            frozen_layer_kinds: [LayerKind::Attention, LayerKind::ConditionalNorm].into(),
        };
        assert!(attn.is_frozen("up.2.attn.qkv.weight"));
        assert!(attn.is_frozen("down.1.norm2.shared.weight"));
        assert!(!attn.is_frozen("down.1.conv2.weight"));
        let scoped = FreezeSpec {
            frozen_blocks: [1].into(),
            frozen_layer_kinds: [LayerKind::Attention].into(),
        };
        assert!(scoped.is_frozen("down.1.attn.proj.bias"));
        assert!(!scoped.is_frozen("down.2.attn.proj.bias"));
        assert!(!scoped.is_frozen("down.1.conv1.bias"));
        assert!(FreezeSpec::everything().is_frozen("output.conv.weight"));
        assert!(matches!(
            FreezeSpec::blocks(&[3]).validate(3),
            Err(DiffusionError::UnknownBlockIndex { index: 3, levels: 3 })
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let s = ScheduleSpec { timesteps: 20, ..Default::default() }.build().unwrap();
        let ds = tiny_data();
        let a = pretrain(&ds, &s, &tiny_cfg(), &quick(6)).unwrap();
        let b = pretrain(&ds, &s, &tiny_cfg(), &quick(6)).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.losses.len(), 6);
    }

    #[test]
    fn finetune_respects_freezing() {
        let s = ScheduleSpec { timesteps: 20, ..Default::default() }.build().unwrap();
        let ds = tiny_data();
        let base = pretrain(&ds, &s, &tiny_cfg(), &quick(2)).unwrap().checkpoint;

        let all = finetune(&base, &ds, &FreezeSpec::everything(), &quick(3)).unwrap().checkpoint;
        assert_eq!(all.tensors, base.tensors);
        assert_eq!(all.meta.iterations, 5);

        let none = finetune(&base, &ds, &FreezeSpec::nothing(), &quick(0)).unwrap().checkpoint;
        assert_eq!(none.tensors, base.tensors);

        let spec = FreezeSpec::blocks(&[0]);
        let out = finetune(&base, &ds, &spec, &quick(3)).unwrap().checkpoint;
        let mut changed = 0;
        for (name, t) in &out.tensors {
            if spec.is_frozen(name) {
                assert_eq!(t, &base.tensors[name], "{name}");
            } else if t != &base.tensors[name] {
                changed += 1;
            }
        }
        assert!(changed > 0);
        assert!(finetune(&base, &ds, &FreezeSpec::blocks(&[2]), &quick(1)).is_err());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let s = ScheduleSpec { timesteps: 20, ..Default::default() }.build().unwrap();
        let mut cfg = quick(30);
        cfg.initial_lr = 1e30;
        cfg.lr_floor = 1e30;
        let err = pretrain(&tiny_data(), &s, &tiny_cfg(), &cfg).unwrap_err();
        assert!(matches!(err, DiffusionError::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn random_init_is_seeded() {
        let a = Denoiser::build(&tiny_cfg(), &mut RandomInit::new(rng_from_seed(1), DType::F32), DType::F32).unwrap();
        let b = Denoiser::build(&tiny_cfg(), &mut RandomInit::new(rng_from_seed(1), DType::F32), DType::F32).unwrap();
        assert_eq!(a.export().unwrap(), b.export().unwrap());
    }
}

#[cfg(test)]
mod gradient_check {
    use super::*;
    use crate::rng::rng_from_seed;

    pub(crate) fn mini_cfg() -> DenoiserConfig {
        DenoiserConfig {
            levels: 2,
            base_channels: 1,
            channel_mults: vec![1, 1],
            attention_levels: vec![1],
            time_embed_dim: 2,
            cond_hidden: 1,
            norm_groups: 1,
            bottleneck_width: 2,
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() -> Result<(), DiffusionError> {
        let cfg = mini_cfg();
        let model = Denoiser::build(&cfg, &mut RandomInit::new(rng_from_seed(21), DType::F64), DType::F64)?;
        println!("parameters: {}", model.parameter_count());
        assert!(model.parameter_count() <= 500);
        let s = crate::diffusion::ScheduleSpec { timesteps: 50, ..Default::default() }.build()?;
        let mut rng = rng_from_seed(3);
        let (b, h, w) = (2, 4, 4);
        let normals = |rng: &mut crate::rng::GustRng| -> Result<Tensor, DiffusionError> {
            let v: Vec<f64> = (0..b * h * w).map(|_| standard_normal(rng)).collect();
            Ok(Tensor::from_vec(v, (b, 1, h, w), &Device::Cpu)?)
        };
        let nominal: Vec<f64> = (0..b * h * w).map(|i| if (i / 3) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let batch = Batch {
            x0: normals(&mut rng)?.sign()?,
            nominal: Tensor::from_vec(nominal, (b, 1, h, w), &Device::Cpu)?,
            timesteps: vec![7, 40],
            eps: normals(&mut rng)?,
        };
        let loss = batch_loss(&model, &s, &batch, LossKind::L2)?;
        let grads = loss.backward()?;
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for (name, var) in model.vars() {
            let analytic = grads.get(var.as_tensor()).expect("every parameter is used").flatten_all()?.to_vec1::<f64>()?;
            let base = var.flatten_all()?.to_vec1::<f64>()?;
            for k in 0..base.len() {
                let eval = |delta: f64| -> Result<f64, DiffusionError> {
                    let mut v = base.clone();
                    v[k] += delta;
                    var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu)?)?;
                    Ok(batch_loss(&model, &s, &batch, LossKind::L2)?.to_scalar::<f64>()?)
                };
                let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
                var.set(&Tensor::from_vec(base.clone(), var.dims(), &Device::Cpu)?)?;
                let rel = (numeric - analytic[k]).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-3, "{name}[{k}]: analytic {} numeric {numeric}", analytic[k]);
            }
        }
        println!("worst relative error {worst:e}");
        Ok(())
    }
}
