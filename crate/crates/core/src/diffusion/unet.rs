use std::collections::BTreeMap;

use candle_core::{DType, Device, Result, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::checkpoint::ParamTensor;
use super::nn::{
    softmax_last, timestep_embedding, upsample2x, Conv2d, GroupNorm, Linear, ParamSource, Registry,
};

/// Shape of the conditional U-Net noise predictor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Encoder/decoder depth; the grid is halved between consecutive levels.
    pub levels: usize,
    pub base_channels: usize,
    /// Width of level `k` is `base_channels * channel_mults[k]`.
    pub channel_mults: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    /// Hidden width of the conditioning branch of each spatially-adaptive norm.
    pub cond_hidden: usize,
    pub norm_groups: usize,
    /// Hidden width of the per-pixel bottleneck MLP.
    pub bottleneck_width: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            attention_levels: vec![2],
            time_embed_dim: 64,
            cond_hidden: 32,
            norm_groups: 8,
            bottleneck_width: 128,
        }
    }
}

impl DenoiserConfig {
    /// Five levels with attention everywhere.
    pub fn paper() -> Self {
        Self {
            levels: 5,
            base_channels: 64,
            channel_mults: vec![1, 2, 2, 4, 4],
            attention_levels: (0..5).collect(),
            time_embed_dim: 256,
            cond_hidden: 64,
            norm_groups: 16,
            bottleneck_width: 512,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.levels == 0 {
            return Err("levels must be >= 1".into());
        }
        if self.channel_mults.len() != self.levels {
            return Err(format!(
                "channel_mults has {} entries for {} levels",
                self.channel_mults.len(),
                self.levels
            ));
        }
        if self.base_channels == 0
            || self.channel_mults.contains(&0)
            || self.time_embed_dim < 2
            || self.cond_hidden == 0
            || self.norm_groups == 0
            || self.bottleneck_width == 0
        {
            return Err("widths must be positive and time_embed_dim >= 2".into());
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.levels) {
            return Err(format!("attention level {l} beyond depth {}", self.levels));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Checks that an `h x w` grid survives `levels - 1` halvings.
    pub fn check_resolution(&self, h: usize, w: usize) -> std::result::Result<(), String> {
        let f = 1usize << (self.levels - 1);
        if h % f != 0 || w % f != 0 {
            return Err(format!("{h}x{w} is not divisible by {f}"));
        }
        Ok(())
    }
}

fn groups_for(requested: usize, channels: usize) -> usize {
    let mut g = requested.min(channels);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

/// Spatially-adaptive normalization: parameter-free group norm followed by a
/// per-pixel scale and shift predicted from the nominal geometry.
#[derive(Debug, Clone)]
struct Spade {
    norm: GroupNorm,
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
    level: usize,
    slot: usize,
}

impl Spade {
    fn new(reg: &mut Registry, name: &str, cfg: &DenoiserConfig, ch: usize, level: usize, slot: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::plain(groups_for(cfg.norm_groups, ch)),
            shared: Conv2d::new(reg, &format!("{name}.shared"), 1, cfg.cond_hidden, 3, 1)?,
            gamma: Conv2d::new(reg, &format!("{name}.gamma"), cfg.cond_hidden, ch, 3, 1)?,
            beta: Conv2d::new(reg, &format!("{name}.beta"), cfg.cond_hidden, ch, 3, 1)?,
            level,
            slot,
        })
    }

    fn modulation(&self, nom: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.shared.forward(nom)?.silu()?;
        Ok((self.gamma.forward(&h)?, self.beta.forward(&h)?))
    }

    fn forward(&self, x: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let (gamma, beta) = &cond.mods[self.slot];
        self.norm
            .forward(x)?
            .broadcast_mul(&(gamma + 1.0)?)?
            .broadcast_add(beta)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Spade,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: Spade,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    out_ch: usize,
}

impl ResBlock {
    fn new(
        reg: &mut Registry,
        name: &str,
        cfg: &DenoiserConfig,
        in_ch: usize,
        out_ch: usize,
        level: usize,
        slots: &mut usize,
    ) -> Result<Self> {
        let norm1 = Spade::new(reg, &format!("{name}.norm1"), cfg, in_ch, level, *slots)?;
        let conv1 = Conv2d::new(reg, &format!("{name}.conv1"), in_ch, out_ch, 3, 1)?;
        let time_proj = Linear::new(reg, &format!("{name}.time_proj"), cfg.time_embed_dim, 2 * out_ch)?;
        let norm2 = Spade::new(reg, &format!("{name}.norm2"), cfg, out_ch, level, *slots + 1)?;
        let conv2 = Conv2d::new(reg, &format!("{name}.conv2"), out_ch, out_ch, 3, 1)?;
        let skip = if in_ch != out_ch {
            Some(Conv2d::new(reg, &format!("{name}.skip"), in_ch, out_ch, 1, 1)?)
        } else {
            None
        };
        *slots += 2;
        Ok(Self {
            norm1,
            conv1,
            time_proj,
            norm2,
            conv2,
            skip,
            out_ch,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let b = x.dim(0)?;
        let h = self.conv1.forward(&self.norm1.forward(x, cond)?.silu()?)?;
        let t = self.time_proj.forward(temb)?;
        let scale = t.narrow(1, 0, self.out_ch)?.reshape((b, self.out_ch, 1, 1))?;
        let shift = t.narrow(1, self.out_ch, self.out_ch)?.reshape((b, self.out_ch, 1, 1))?;
        let h = self
            .norm2
            .forward(&h, cond)?
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}

/// Single-head self-attention over all pixels, with a residual connection.
#[derive(Debug, Clone)]
struct Attention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    ch: usize,
}

impl Attention {
    fn new(reg: &mut Registry, name: &str, cfg: &DenoiserConfig, ch: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(reg, &format!("{name}.norm"), groups_for(cfg.norm_groups, ch), ch)?,
            qkv: Conv2d::new(reg, &format!("{name}.qkv"), ch, 3 * ch, 1, 1)?,
            proj: Conv2d::new(reg, &format!("{name}.proj"), ch, ch, 1, 1)?,
            ch,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((b, 3 * c, n))?;
        let q = qkv.narrow(1, 0, c)?;
        let k = qkv.narrow(1, c, c)?;
        let v = qkv.narrow(1, 2 * c, c)?;
        let scores = (q.transpose(1, 2)?.contiguous()?.matmul(&k.contiguous()?)? / (self.ch as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = v.contiguous()?.matmul(&attn.transpose(1, 2)?.contiguous()?)?;
        x + self.proj.forward(&out.reshape((b, c, h, w))?)?
    }
}

#[derive(Debug, Clone)]
struct Level {
    block: ResBlock,
    attn: Option<Attention>,
    resample: Option<Conv2d>,
}

/// Per-nominal quantities that do not depend on `x_t` or `t`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    nominal: Tensor,
    mods: Vec<(Tensor, Tensor)>,
}

/// The conditional noise predictor `eps_theta(x_t, t, x_nom)`.
pub struct Denoiser {
    cfg: DenoiserConfig,
    dtype: DType,
    vars: BTreeMap<String, Var>,
    time1: Linear,
    time2: Linear,
    input: Conv2d,
    down: Vec<Level>,
    mid1: Conv2d,
    mid2: Conv2d,
    up: Vec<Level>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    spades: Vec<Spade>,
}

impl Denoiser {
    /// Builds the network, drawing every parameter from `source` in a fixed order.
    pub fn build(cfg: &DenoiserConfig, source: &mut dyn ParamSource, dtype: DType) -> Result<Self> {
        if let Err(e) = cfg.validate() {
            candle_core::bail!("invalid denoiser config: {e}");
        }
        let mut reg = Registry::new(source);
        let tdim = cfg.time_embed_dim;
        let time1 = Linear::new(&mut reg, "time.lin1", tdim, tdim)?;
        let time2 = Linear::new(&mut reg, "time.lin2", tdim, tdim)?;
        let input = Conv2d::new(&mut reg, "input.conv", 2, cfg.channels(0), 3, 1)?;
        let mut slots = 0;
        let mut down = Vec::with_capacity(cfg.levels);
        let mut ch = cfg.channels(0);
        for k in 0..cfg.levels {
            let out = cfg.channels(k);
            let block = ResBlock::new(&mut reg, &format!("down.{k}"), cfg, ch, out, k, &mut slots)?;
            let attn = if cfg.attention_levels.contains(&k) {
                Some(Attention::new(&mut reg, &format!("down.{k}.attn"), cfg, out)?)
            } else {
                None
            };
            let resample = if k + 1 < cfg.levels {
                Some(Conv2d::new(&mut reg, &format!("down.{k}.downsample"), out, out, 3, 2)?)
            } else {
                None
            };
            down.push(Level { block, attn, resample });
            ch = out;
        }
        let mid1 = Conv2d::new(&mut reg, "mid.mlp.fc1", ch, cfg.bottleneck_width, 1, 1)?;
        let mid2 = Conv2d::new(&mut reg, "mid.mlp.fc2", cfg.bottleneck_width, ch, 1, 1)?;
        let mut up = Vec::with_capacity(cfg.levels);
        for k in (0..cfg.levels).rev() {
            let out = cfg.channels(k);
            let block = ResBlock::new(&mut reg, &format!("up.{k}"), cfg, ch + out, out, k, &mut slots)?;
            let attn = if cfg.attention_levels.contains(&k) {
                Some(Attention::new(&mut reg, &format!("up.{k}.attn"), cfg, out)?)
            } else {
                None
            };
            let resample = if k > 0 {
                Some(Conv2d::new(&mut reg, &format!("up.{k}.upsample"), out, out, 3, 1)?)
            } else {
                None
            };
            up.push(Level { block, attn, resample });
            ch = out;
        }
        let out_norm = GroupNorm::new(&mut reg, "output.norm", groups_for(cfg.norm_groups, ch), ch)?;
        let out_conv = Conv2d::new(&mut reg, "output.conv", ch, 1, 3, 1)?;
        let spades = down
            .iter()
            .chain(&up)
            .flat_map(|l| [l.block.norm1.clone(), l.block.norm2.clone()])
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            dtype,
            vars: reg.vars,
            time1,
            time2,
            input,
            down,
            mid1,
            mid2,
            up,
            out_norm,
            out_conv,
            spades,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// All parameters by name.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Nominal pyramid and normalization modulations for `x_nom` of shape
    /// `(B, 1, H, W)`; a batch of one broadcasts over any `x_t` batch.
    pub fn condition(&self, x_nom: &Tensor) -> Result<Conditioning> {
        let mut pyramid = vec![x_nom.clone()];
        for _ in 1..self.cfg.levels {
            let last = pyramid.last().expect("non-empty");
            pyramid.push(last.avg_pool2d(2)?);
        }
        let mods = self
            .spades
            .iter()
            .map(|s| s.modulation(&pyramid[s.level]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Conditioning {
            nominal: x_nom.clone(),
            mods,
        })
    }

    /// Predicted noise for `x_t` of shape `(B, 1, H, W)` at timesteps `ts`.
    pub fn forward(&self, x_t: &Tensor, ts: &[f64], x_nom: &Tensor) -> Result<Tensor> {
        let cond = self.condition(x_nom)?;
        self.forward_with(x_t, ts, &cond)
    }

    pub fn forward_with(&self, x_t: &Tensor, ts: &[f64], cond: &Conditioning) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        if c != 1 || ts.len() != b {
            candle_core::bail!("expected (B, 1, H, W) input with B timesteps, got {:?} and {}", x_t.dims(), ts.len());
        }
        if let Err(e) = self.cfg.check_resolution(h, w) {
            candle_core::bail!("{e}");
        }
        let (nb, _, nh, nw) = cond.nominal.dims4()?;
        if (nh, nw) != (h, w) || (nb != b && nb != 1) {
            candle_core::bail!("nominal shape {:?} does not match input {:?}", cond.nominal.dims(), x_t.dims());
        }
        let temb = timestep_embedding(ts, self.cfg.time_embed_dim, self.dtype)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?.silu()?;
        let nominal = cond.nominal.broadcast_as((b, 1, h, w))?.contiguous()?;
        let mut x = self.input.forward(&Tensor::cat(&[x_t, &nominal], 1)?)?;
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for level in &self.down {
            x = level.block.forward(&x, &temb, cond)?;
            if let Some(attn) = &level.attn {
                x = attn.forward(&x)?;
            }
            skips.push(x.clone());
            if let Some(ds) = &level.resample {
                x = ds.forward(&x)?;
            }
        }
        x = (&x + self.mid2.forward(&self.mid1.forward(&x)?.silu()?)?)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            x = level.block.forward(&Tensor::cat(&[&x, &skip], 1)?, &temb, cond)?;
            if let Some(attn) = &level.attn {
                x = attn.forward(&x)?;
            }
            if let Some(us) = &level.resample {
                x = us.forward(&upsample2x(&x)?)?;
            }
        }
        self.out_conv.forward(&self.out_norm.forward(&x)?.silu()?)
    }

    /// Parameters rounded to f32.
    pub fn export(&self) -> Result<BTreeMap<String, ParamTensor>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let values = var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((name.clone(), ParamTensor { shape: var.dims().to_vec(), values }))
            })
            .collect()
    }
}

/// Stacks `(H*W)` real grids into a `(B, 1, H, W)` tensor.
pub fn stack_grids(grids: &[&[f32]], h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        data.extend_from_slice(g);
    }
    Tensor::from_vec(data, (grids.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::nn::RandomInit;
    use crate::rng::rng_from_seed;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            levels: 2,
            base_channels: 4,
            channel_mults: vec![1, 2],
            attention_levels: vec![1],
            time_embed_dim: 8,
            cond_hidden: 4,
            norm_groups: 2,
            bottleneck_width: 8,
        }
    }

    #[test]
    fn shapes_and_names() -> Result<()> {
        let model = Denoiser::build(&tiny(), &mut RandomInit::new(rng_from_seed(0), DType::F32), DType::F32)?;
        let x = Tensor::zeros((3, 1, 8, 8), DType::F32, &Device::Cpu)?;
        let nom = Tensor::ones((1, 1, 8, 8), DType::F32, &Device::Cpu)?;
        let y = model.forward(&x, &[1.0, 5.0, 9.0], &nom)?;
        assert_eq!(y.dims(), &[3, 1, 8, 8]);
        for name in ["down.0.norm1.gamma.weight", "down.1.attn.qkv.weight", "mid.mlp.fc1.weight", "up.1.upsample.weight", "up.0.skip.weight"] {
            assert!(model.vars().contains_key(name), "{name}");
        }
        assert!(!model.vars().contains_key("up.0.upsample.weight"));
        Ok(())
    }

    #[test]
    fn broadcast_nominal_matches_repeated_nominal() -> Result<()> {
        let model = Denoiser::build(&tiny(), &mut RandomInit::new(rng_from_seed(3), DType::F64), DType::F64)?;
        let x = Tensor::randn(0f64, 1.0, (2, 1, 8, 8), &Device::Cpu)?;
        let nom = Tensor::randn(0f64, 1.0, (1, 1, 8, 8), &Device::Cpu)?;
        let a = model.forward(&x, &[3.0, 7.0], &nom)?;
        let b = model.forward(&x, &[3.0, 7.0], &Tensor::cat(&[&nom, &nom], 0)?)?;
        let diff = (a - b)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(diff < 1e-12);
        Ok(())
    }

    #[test]
    fn rejects_indivisible_grid() -> Result<()> {
        let model = Denoiser::build(&tiny(), &mut RandomInit::new(rng_from_seed(0), DType::F32), DType::F32)?;
        let x = Tensor::zeros((1, 1, 7, 8), DType::F32, &Device::Cpu)?;
        assert!(model.forward(&x, &[1.0], &x).is_err());
        Ok(())
    }
}
