//! Conditional noise predictor: a small U-Net whose input is the noisy image
//! concatenated with the 4-channel fusion map, and whose residual blocks are
//! all modulated (FiLM scale and shift) by a joint timestep/brightness
//! embedding.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{conv2d, group_norm, linear, Conv2d, Conv2dConfig, GroupNorm, Linear, VarBuilder, VarMap};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::imaging::RawImage;
use crate::preprocess::FUSION_CHANNELS;
use crate::rng;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
    pub brightness_embed_dim: usize,
    /// Probability of replacing a sample's fusion map with zeros during training.
    pub cond_dropout_prob: f64,
    /// Upper bound on group-norm groups; the largest divisor of the channel count not above it is used.
    pub norm_groups: usize,
    pub attention: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            time_embed_dim: 128,
            brightness_embed_dim: 32,
            cond_dropout_prob: 0.1,
            norm_groups: 8,
            attention: true,
        }
    }
}

impl DenoiserConfig {
    /// A narrow network for tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            time_embed_dim: 16,
            brightness_embed_dim: 8,
            norm_groups: 4,
            ..Self::default()
        }
    }

    pub fn input_channels(&self) -> usize {
        IMAGE_CHANNELS + FUSION_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.len() < 2 {
            return Err(Error::Config("channel_multipliers needs at least two levels".into()));
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and >= 2".into()));
        }
        if self.brightness_embed_dim == 0 || self.norm_groups == 0 {
            return Err(Error::Config("embedding dims and norm_groups must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::Config("cond_dropout_prob must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Spatial sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channel_multipliers.len() - 1)
    }

    fn embed_dim(&self) -> usize {
        4 * self.base_channels
    }
}

/// Target brightness in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct BrightnessLevel(f64);

impl BrightnessLevel {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidArgument(format!(
                "brightness level {value} outside [0, 1]"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Mean BT.601 luma.
pub fn brightness_of(image: &RawImage) -> BrightnessLevel {
    BrightnessLevel(image.mean_luma().clamp(0.0, 1.0))
}

fn groups_for(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

fn conv3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    conv2d(
        cin,
        cout,
        3,
        Conv2dConfig {
            padding: 1,
            stride,
            ..Default::default()
        },
        vb,
    )
}

fn conv1(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    conv2d(cin, cout, 1, Conv2dConfig::default(), vb)
}

/// Sinusoidal embedding of integer timesteps, `(N, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

/// Per-channel affine modulation of a feature map from the conditioning embedding.
struct Film {
    proj: Linear,
    channels: usize,
}

impl Film {
    fn new(embed_dim: usize, channels: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            proj: linear(embed_dim, 2 * channels, vb)?,
            channels,
        })
    }

    fn forward(&self, h: &Tensor, emb: &Tensor) -> candle_core::Result<Tensor> {
        let params = self.proj.forward(&emb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let scale = params.narrow(1, 0, self.channels)?;
        let shift = params.narrow(1, self.channels, self.channels)?;
        h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    film: Film,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, cfg: &DenoiserConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            norm1: group_norm(groups_for(cin, cfg.norm_groups), cin, 1e-5, vb.pp("norm1"))?,
            conv1: conv3(cin, cout, 1, vb.pp("conv1"))?,
            film: Film::new(cfg.embed_dim(), cout, vb.pp("film"))?,
            norm2: group_norm(groups_for(cout, cfg.norm_groups), cout, 1e-5, vb.pp("norm2"))?,
            conv2: conv3(cout, cout, 1, vb.pp("conv2"))?,
            skip: if cin != cout {
                Some(conv1(cin, cout, vb.pp("skip"))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.film.forward(&h, emb)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        h + skip
    }
}

/// Single-head spatial self-attention with a residual connection.
struct Attention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    channels: usize,
}

impl Attention {
    fn new(channels: usize, cfg: &DenoiserConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            norm: group_norm(groups_for(channels, cfg.norm_groups), channels, 1e-5, vb.pp("norm"))?,
            qkv: conv1(channels, 3 * channels, vb.pp("qkv"))?,
            proj: conv1(channels, channels, vb.pp("proj"))?,
            channels,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((n, 3 * c, h * w))?;
        let q = qkv.narrow(1, 0, c)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(1, c, c)?.contiguous()?;
        let v = qkv.narrow(1, 2 * c, c)?.transpose(1, 2)?.contiguous()?;
        let scores = (q.matmul(&k)? / (self.channels as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((n, c, h, w))?;
        x + self.proj.forward(&out)?
    }
}

struct Level {
    block: ResBlock,
    resample: Option<Conv2d>,
}

struct UNet {
    time_embed: Linear,
    brightness_in: Linear,
    brightness_out: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid1: ResBlock,
    mid_attn: Option<Attention>,
    mid2: ResBlock,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    cfg: DenoiserConfig,
}

impl UNet {
    fn new(cfg: &DenoiserConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let emb = cfg.embed_dim();
        let widths: Vec<usize> = cfg.channel_multipliers.iter().map(|m| m * cfg.base_channels).collect();
        let levels = widths.len();

        let mut down = Vec::with_capacity(levels);
        let mut prev = cfg.base_channels;
        for (i, &ch) in widths.iter().enumerate() {
            let vb = vb.pp(format!("down{i}"));
            down.push(Level {
                block: ResBlock::new(prev, ch, cfg, vb.pp("block"))?,
                resample: if i + 1 < levels {
                    Some(conv3(ch, ch, 2, vb.pp("downsample"))?)
                } else {
                    None
                },
            });
            prev = ch;
        }

        let bottom = *widths.last().unwrap();
        let mut up = Vec::with_capacity(levels);
        for (i, &ch) in widths.iter().enumerate().rev() {
            let vb = vb.pp(format!("up{i}"));
            up.push(Level {
                block: ResBlock::new(prev + ch, ch, cfg, vb.pp("block"))?,
                resample: if i > 0 {
                    Some(conv3(ch, widths[i - 1], 1, vb.pp("upsample"))?)
                } else {
                    None
                },
            });
            prev = if i > 0 { widths[i - 1] } else { ch };
        }

        Ok(Self {
            time_embed: linear(cfg.time_embed_dim, emb, vb.pp("time_embed"))?,
            brightness_in: linear(1, cfg.brightness_embed_dim, vb.pp("brightness_embed.0"))?,
            brightness_out: linear(cfg.brightness_embed_dim, emb, vb.pp("brightness_embed.1"))?,
            conv_in: conv3(cfg.input_channels(), cfg.base_channels, 1, vb.pp("conv_in"))?,
            down,
            mid1: ResBlock::new(bottom, bottom, cfg, vb.pp("mid.block1"))?,
            mid_attn: if cfg.attention {
                Some(Attention::new(bottom, cfg, vb.pp("mid.attn"))?)
            } else {
                None
            },
            mid2: ResBlock::new(bottom, bottom, cfg, vb.pp("mid.block2"))?,
            up,
            norm_out: group_norm(groups_for(widths[0], cfg.norm_groups), widths[0], 1e-5, vb.pp("norm_out"))?,
            conv_out: conv3(widths[0], IMAGE_CHANNELS, 1, vb.pp("conv_out"))?,
            cfg: cfg.clone(),
        })
    }

    fn forward(&self, x: &Tensor, t_emb: &Tensor, lambdas: &Tensor) -> candle_core::Result<Tensor> {
        let b = self
            .brightness_out
            .forward(&self.brightness_in.forward(lambdas)?.silu()?)?;
        let emb = (self.time_embed.forward(t_emb)? + b)?;

        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            h = level.block.forward(&h, &emb)?;
            skips.push(h.clone());
            if let Some(ds) = &level.resample {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, &emb)?;
        if let Some(attn) = &self.mid_attn {
            h = attn.forward(&h)?;
        }
        h = self.mid2.forward(&h, &emb)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = level.block.forward(&Tensor::cat(&[&h, &skip], 1)?, &emb)?;
            if let Some(us) = &level.resample {
                let (_, _, hh, ww) = h.dims4()?;
                h = us.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        debug_assert!(skips.is_empty() && self.cfg.channel_multipliers.len() == self.down.len());
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

/// Re-initializes every trainable tensor from a seeded generator: weights
/// uniform in `±1/sqrt(fan_in)`, conv/linear biases zero, norm gains untouched.
pub fn seeded_init(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for (i, name) in names.into_iter().enumerate() {
        let var = &data[name];
        let dims = var.dims().to_vec();
        if dims.len() >= 2 {
            let fan_in: usize = dims[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut r = rng::stream(seed, i as u64);
            let vals: Vec<f64> = (0..var.elem_count())
                .map(|_| r.random_range(-bound..bound))
                .collect();
            let t = Tensor::from_vec(vals, dims, var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        } else if name.ends_with(".bias") && !name.contains("norm") {
            var.set(&var.zeros_like()?)?;
        }
    }
    Ok(())
}

/// The trainable noise predictor together with its parameter store.
pub struct Denoiser {
    config: DenoiserConfig,
    varmap: VarMap,
    net: UNet,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser")
            .field("config", &self.config)
            .field("dtype", &self.dtype)
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let net = UNet::new(&config, vb)?;
        seeded_init(&varmap, seed)?;
        Ok(Self {
            config,
            varmap,
            net,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn num_parameters(&self) -> usize {
        self.varmap.all_vars().iter().map(|v| v.elem_count()).sum()
    }

    /// Parameters sorted by name.
    pub fn named_parameters(&self) -> Vec<(String, candle_core::Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut v: Vec<(String, candle_core::Var)> =
            data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Batched forward pass with one timestep and brightness level per sample.
    ///
    /// `cond` may be `(1, 4, H, W)` (shared) or `(N, 4, H, W)`; `None` selects
    /// the unconditional branch (all-zero map). When `dropout` is given, each
    /// sample's map is independently zeroed with probability
    /// `cond_dropout_prob`.
    pub fn forward<R: Rng>(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        cond: Option<&Tensor>,
        lambdas: &[f64],
        dropout: Option<&mut R>,
    ) -> Result<Tensor> {
        let (n, c, h, w) = x_t.dims4().map_err(|_| {
            Error::ShapeMismatch(format!("noisy input must be (N, 3, H, W), got {:?}", x_t.dims()))
        })?;
        if c != IMAGE_CHANNELS {
            return Err(Error::ShapeMismatch(format!("noisy input has {c} channels, expected 3")));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial size {h}x{w} must be divisible by {m}"
            )));
        }
        if ts.len() != n || lambdas.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "batch of {n} needs {n} timesteps and brightness levels, got {} and {}",
                ts.len(),
                lambdas.len()
            )));
        }
        let cond = match cond {
            Some(cond) => {
                let (cn, cc, ch, cw) = cond.dims4().map_err(|_| {
                    Error::ShapeMismatch(format!("fusion map must be (N, 4, H, W), got {:?}", cond.dims()))
                })?;
                if cc != FUSION_CHANNELS || ch != h || cw != w || (cn != n && cn != 1) {
                    return Err(Error::ShapeMismatch(format!(
                        "fusion map {:?} does not match noisy input {:?}",
                        cond.dims(),
                        x_t.dims()
                    )));
                }
                cond.broadcast_as((n, FUSION_CHANNELS, h, w))?.to_dtype(x_t.dtype())?
            }
            None => Tensor::zeros((n, FUSION_CHANNELS, h, w), x_t.dtype(), x_t.device())?,
        };
        let cond = match dropout {
            Some(r) if self.config.cond_dropout_prob > 0.0 => {
                let p = self.config.cond_dropout_prob;
                let keep: Vec<f32> = (0..n)
                    .map(|_| if r.random::<f64>() < p { 0.0 } else { 1.0 })
                    .collect();
                let keep = Tensor::from_vec(keep, (n, 1, 1, 1), x_t.device())?.to_dtype(x_t.dtype())?;
                cond.broadcast_mul(&keep)?
            }
            _ => cond,
        };
        let input = Tensor::cat(&[x_t, &cond], 1)?;
        let t_emb = timestep_embedding(ts, self.config.time_embed_dim, x_t.dtype(), x_t.device())?;
        let lam = Tensor::from_vec(lambdas.to_vec(), (n, 1), x_t.device())?.to_dtype(x_t.dtype())?;
        Ok(self.net.forward(&input, &t_emb, &lam)?)
    }

    /// Inference-mode noise estimate for a batch sharing one timestep and level.
    pub fn predict_noise(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
        lambda: BrightnessLevel,
    ) -> Result<Tensor> {
        let n = x_t.dims().first().copied().unwrap_or(0);
        self.forward::<rand_chacha::ChaCha8Rng>(x_t, &vec![t; n], cond, &vec![lambda.value(); n], None)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Tensor, lambda: f64) -> Result<Tensor> {
        self.predict_noise(x_t, t, Some(cond), BrightnessLevel::new(lambda)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian_noise;

    fn tiny(dtype: DType) -> Denoiser {
        Denoiser::new(DenoiserConfig::tiny(), 3, dtype, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()
            .to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn output_matches_input_shape() {
        let d = tiny(DType::F32);
        let mut r = rng::seeded(0);
        let x = gaussian_noise(&mut r, (2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let c = gaussian_noise(&mut r, (1, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let out = d.predict_noise(&x, 10, Some(&c), BrightnessLevel::new(0.5).unwrap()).unwrap();
        assert_eq!(out.dims(), &[2, 3, 16, 16]);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let d = tiny(DType::F32);
        let lam = BrightnessLevel::new(0.5).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let c = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(d.predict_noise(&x, 1, Some(&c), lam).is_err());
        let x4 = Tensor::zeros((1, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(d.predict_noise(&x4, 1, None, lam).is_err());
        let odd = Tensor::zeros((1, 3, 15, 15), DType::F32, &Device::Cpu).unwrap();
        assert!(d.predict_noise(&odd, 1, None, lam).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = tiny(DType::F32);
        let b = tiny(DType::F32);
        for ((na, va), (nb, vb)) in a.named_parameters().iter().zip(b.named_parameters()) {
            assert_eq!(na, &nb);
            assert_eq!(max_abs_diff(va.as_tensor(), vb.as_tensor()), 0.0);
        }
    }

    #[test]
    fn brightness_level_bounds() {
        assert!(BrightnessLevel::new(-0.1).is_err());
        assert!(BrightnessLevel::new(1.1).is_err());
        let black = RawImage::constant(8, 8, [0.0; 3]).unwrap();
        let white = RawImage::constant(8, 8, [1.0; 3]).unwrap();
        assert_eq!(brightness_of(&black).value(), 0.0);
        assert!((brightness_of(&white).value() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn groups_divide_channels() {
        assert_eq!(groups_for(8, 8), 8);
        assert_eq!(groups_for(12, 8), 6);
        assert_eq!(groups_for(3, 8), 3);
    }
}
