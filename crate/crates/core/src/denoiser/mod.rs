//! Coordinate-conditioned denoiser.
//!
//! A small U-shaped network predicts the clean residual `x̂0` from the noisy
//! residual `x_t`, the stage conditioning residual, the upsampled initial LR
//! image and the output coordinate grid. A coordinate adapter turns the
//! Fourier-encoded grid, fused with a timestep/scale embedding and the
//! network's input features, into per-level features; every residual block
//! reads a `(γ, β)` pair from them and modulates its first normalization as
//! `h · (1 + γ) + β`. The modulation heads start at zero, so an untrained
//! adapter is an exact identity.

pub mod coords;
pub mod layers;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use coords::{fourier_encode, make_coordinate_map, CoordinateMap};
pub use layers::ParamStore;

use crate::error::{Error, Result};
use crate::image::{stack_images, ImageTensor};
use crate::resample::bicubic_resize_tensor;
use layers::{Conv2d, EncoderBlock, GroupNorm, InitSource, Linear, LoadSource, ParamSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Channel multiplier per resolution level; the length is the depth.
    pub channel_multipliers: Vec<usize>,
    pub n_fourier_bands: usize,
    /// Width of the timestep/scale embedding.
    pub embed_dim: usize,
    /// Modulated residual blocks per level, on each side of the U.
    pub n_res_blocks: usize,
    pub norm_groups: usize,
    /// Smallest output side the network must handle.
    pub min_resolution: usize,
    /// Largest timestep the network is conditioned on.
    pub max_timestep: usize,
    /// Largest per-stage scale the network is conditioned on.
    pub max_scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            channel_multipliers: vec![1, 2],
            n_fourier_bands: 4,
            embed_dim: 32,
            n_res_blocks: 1,
            norm_groups: 4,
            min_resolution: 16,
            max_timestep: crate::diffusion::DEFAULT_STEPS,
            max_scale: crate::plan::DEFAULT_FIXED_SCALE,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.base_channels,
            self.n_fourier_bands,
            self.embed_dim,
            self.n_res_blocks,
            self.norm_groups,
            self.min_resolution,
            self.max_timestep,
        ];
        if positive.contains(&0) || self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::invalid("denoiser config sizes must be positive"));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::invalid("embed_dim must be even"));
        }
        if !(self.max_scale > 1.0) {
            return Err(Error::invalid("max_scale must exceed 1"));
        }
        for ch in self.level_channels() {
            if ch % self.norm_groups != 0 {
                return Err(Error::invalid(format!(
                    "{ch} channels not divisible into {} norm groups",
                    self.norm_groups
                )));
            }
        }
        let shrink = 1usize << (self.channel_multipliers.len() - 1);
        if self.min_resolution < 2 * shrink {
            return Err(Error::invalid(format!(
                "{} levels need outputs of at least {} px, min_resolution is {}",
                self.channel_multipliers.len(),
                2 * shrink,
                self.min_resolution
            )));
        }
        Ok(())
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }
}

/// All learnable weights of the denoiser and its encoders.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub store: ParamStore,
}

impl DenoiserParams {
    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self { config: self.config.clone(), store: self.store.deep_clone()? })
    }
}

/// Fan-in-scaled random weights; modulation heads start at zero.
pub fn init_params<R: Rng>(config: &DenoiserConfig, rng: &mut R) -> Result<DenoiserParams> {
    config.validate()?;
    let mut src = InitSource::new(rng);
    Denoiser::build(config, &mut src)?;
    Ok(DenoiserParams { config: config.clone(), store: src.store })
}

/// Sinusoidal embedding of scalar conditioning values, `(B, dim)`.
pub fn sinusoidal_embedding(values: &[f64], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out.push((v * freq).sin() as f32);
        }
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out.push((v * freq).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(out, (values.len(), dim), device)?)
}

/// Residual block whose first normalization is modulated by the adapter.
#[derive(Debug, Clone)]
struct ModulatedBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    head: Conv2d,
    channels: usize,
}

impl ModulatedBlock {
    fn new(src: &mut dyn ParamSource, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(src, &format!("{name}.norm1"), channels, groups)?,
            conv1: Conv2d::new(src, &format!("{name}.conv1"), channels, channels, 3, false)?,
            norm2: GroupNorm::new(src, &format!("{name}.norm2"), channels, groups)?,
            conv2: Conv2d::new(src, &format!("{name}.conv2"), channels, channels, 3, false)?,
            head: Conv2d::new(src, &format!("{name}.modulation"), channels, 2 * channels, 1, true)?,
            channels,
        })
    }

    fn forward(&self, x: &Tensor, adapter: &Tensor) -> Result<Tensor> {
        let gb = self.head.forward(adapter)?;
        let gamma = gb.narrow(1, 0, self.channels)?;
        let beta = gb.narrow(1, self.channels, self.channels)?;
        let h = self.norm1.forward(x)?;
        let h = ((h * (gamma + 1.0)?)? + beta)?;
        let h = self.conv1.forward(&h.silu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        Ok((x + h)?)
    }
}

/// Shallow image encoder: one conv and one residual block.
#[derive(Debug, Clone)]
struct ImageEncoder {
    head: Conv2d,
    block: EncoderBlock,
}

impl ImageEncoder {
    fn new(src: &mut dyn ParamSource, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            head: Conv2d::new(src, &format!("{name}.head"), 3, channels, 3, false)?,
            block: EncoderBlock::new(src, &format!("{name}.block"), channels)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.block.forward(&self.head.forward(x)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    adapter: Conv2d,
    down: Option<Conv2d>,
    encoder: Vec<ModulatedBlock>,
    up: Option<Conv2d>,
    merge: Option<Conv2d>,
    decoder: Vec<ModulatedBlock>,
}

/// Encoded conditioning and coordinate features for one stage.
#[derive(Debug, Clone)]
pub struct StageContext {
    dims: Vec<usize>,
    f_lr: Tensor,
    f_init: Tensor,
    coord: Tensor,
}

/// The network, bound to a parameter set.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    lr_encoder: ImageEncoder,
    init_encoder: ImageEncoder,
    input: Conv2d,
    coord1: Conv2d,
    coord2: Conv2d,
    embed1: Linear,
    embed2: Linear,
    embed_proj: Linear,
    levels: Vec<Level>,
    out_norm: GroupNorm,
    out: Conv2d,
}

fn down2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    bicubic_resize_tensor(x, (h.div_ceil(2), w.div_ceil(2)))
}

impl Denoiser {
    pub fn new(params: &DenoiserParams) -> Result<Self> {
        params.config.validate()?;
        let mut src = LoadSource { store: &params.store };
        Self::build(&params.config, &mut src)
    }

    fn build(config: &DenoiserConfig, src: &mut dyn ParamSource) -> Result<Self> {
        let ch = config.level_channels();
        let c0 = ch[0];
        let groups = config.norm_groups;
        let bands = 4 * config.n_fourier_bands;
        let e = config.embed_dim;
        let mut levels = Vec::with_capacity(ch.len());
        for (l, &c) in ch.iter().enumerate() {
            let adapter_in = if l == 0 { c0 } else { ch[l - 1] };
            let down = if l == 0 {
                None
            } else {
                Some(Conv2d::new(src, &format!("down.l{l}"), ch[l - 1], c, 3, false)?)
            };
            let has_lower = l + 1 < ch.len();
            let (up, merge) = if has_lower {
                (
                    Some(Conv2d::new(src, &format!("up.l{l}"), ch[l + 1], c, 3, false)?),
                    Some(Conv2d::new(src, &format!("merge.l{l}"), 2 * c, c, 3, false)?),
                )
            } else {
                (None, None)
            };
            let encoder = (0..config.n_res_blocks)
                .map(|b| ModulatedBlock::new(src, &format!("enc.l{l}.b{b}"), c, groups))
                .collect::<Result<Vec<_>>>()?;
            // The deepest level is the bottleneck; it only has encoder blocks.
            let decoder = if has_lower {
                (0..config.n_res_blocks)
                    .map(|b| ModulatedBlock::new(src, &format!("dec.l{l}.b{b}"), c, groups))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            levels.push(Level {
                adapter: Conv2d::new(src, &format!("adapter.l{l}"), adapter_in, c, 3, false)?,
                down,
                encoder,
                up,
                merge,
                decoder,
            });
        }
        Ok(Self {
            config: config.clone(),
            lr_encoder: ImageEncoder::new(src, "lr_encoder", c0)?,
            init_encoder: ImageEncoder::new(src, "init_encoder", c0)?,
            input: Conv2d::new(src, "input", 3 + 2 * c0, c0, 3, false)?,
            coord1: Conv2d::new(src, "coord_encoder.conv1", bands, c0, 3, false)?,
            coord2: Conv2d::new(src, "coord_encoder.conv2", c0, c0, 3, false)?,
            embed1: Linear::new(src, "embed.fc1", 2 * e, e)?,
            embed2: Linear::new(src, "embed.fc2", e, e)?,
            embed_proj: Linear::new(src, "embed.proj", e, c0)?,
            levels,
            out_norm: GroupNorm::new(src, "out_norm", c0, groups)?,
            out: Conv2d::new(src, "out", c0, 3, 3, false)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn check_conditioning(&self, timesteps: &[usize], scales: &[f64], batch: usize) -> Result<()> {
        if timesteps.len() != batch || scales.len() != batch {
            return Err(Error::invalid(format!(
                "batch of {batch} with {} timesteps and {} scales",
                timesteps.len(),
                scales.len()
            )));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t == 0 || t > self.config.max_timestep) {
            return Err(Error::TimestepOutOfRange { t, steps: self.config.max_timestep });
        }
        let max = self.config.max_scale * (1.0 + 1e-9);
        if let Some(s) = scales.iter().find(|&&s| !(1.0..=max).contains(&s)) {
            return Err(Error::invalid(format!(
                "scale {s} outside [1, {}]",
                self.config.max_scale
            )));
        }
        Ok(())
    }

    /// Batched forward pass on `(B, 3, H, W)` f32 tensors.
    ///
    /// `cond` is the stage conditioning residual and `init_up` the initial
    /// LR image, both already at the output resolution.
    pub fn forward(
        &self,
        x_t: &Tensor,
        timesteps: &[usize],
        scales: &[f64],
        cond: &Tensor,
        init_up: &Tensor,
        cmap: &CoordinateMap,
    ) -> Result<Tensor> {
        let ctx = self.stage_context(cond, init_up, cmap)?;
        self.forward_with(x_t, timesteps, scales, &ctx)
    }

    /// Encodes the inputs that stay fixed across the timesteps of a stage.
    pub fn stage_context(&self, cond: &Tensor, init_up: &Tensor, cmap: &CoordinateMap) -> Result<StageContext> {
        let (_, c, h, w) = cond.dims4()?;
        if init_up.dims() != cond.dims() {
            return Err(Error::ShapeMismatch {
                expected: cond.dims().to_vec(),
                actual: init_up.dims().to_vec(),
            });
        }
        if c != 3 {
            return Err(Error::invalid(format!("expected 3 channels, got {c}")));
        }
        if cmap.resolution() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![2, h, w],
                actual: vec![2, cmap.resolution().0, cmap.resolution().1],
            });
        }
        let shrink = 1usize << (self.config.levels() - 1);
        if h < shrink || w < shrink {
            return Err(Error::invalid(format!("{h}x{w} too small for the network depth")));
        }
        let f_lr = self.lr_encoder.forward(cond)?;
        let f_init = self.init_encoder.forward(init_up)?;
        let fourier = fourier_encode(cmap, self.config.n_fourier_bands)?;
        let (fc, _, _) = fourier.dim();
        let fourier: Vec<f32> = fourier.iter().map(|&v| v as f32).collect();
        let fourier = Tensor::from_vec(fourier, (1, fc, h, w), cond.device())?;
        let coord = self.coord2.forward(&self.coord1.forward(&fourier)?.silu()?)?;
        Ok(StageContext { dims: cond.dims().to_vec(), f_lr, f_init, coord })
    }

    /// [`Denoiser::forward`] with the stage inputs already encoded.
    pub fn forward_with(
        &self,
        x_t: &Tensor,
        timesteps: &[usize],
        scales: &[f64],
        ctx: &StageContext,
    ) -> Result<Tensor> {
        if x_t.dims() != ctx.dims.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: ctx.dims.clone(),
                actual: x_t.dims().to_vec(),
            });
        }
        let b = ctx.dims[0];
        self.check_conditioning(timesteps, scales, b)?;
        let device = x_t.device();
        let h_in = self.input.forward(&Tensor::cat(&[x_t, &ctx.f_lr, &ctx.f_init], 1)?)?;

        // Coordinate adapter.
        let t_values: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let s_values: Vec<f64> = scales.iter().map(|&s| 100.0 * s).collect();
        let e = self.config.embed_dim;
        let emb = Tensor::cat(
            &[
                sinusoidal_embedding(&t_values, e, device)?,
                sinusoidal_embedding(&s_values, e, device)?,
            ],
            D::Minus1,
        )?;
        let emb = self.embed2.forward(&self.embed1.forward(&emb)?.silu()?)?;
        let emb = self.embed_proj.forward(&emb)?.unsqueeze(2)?.unsqueeze(3)?;
        let mut adapter_in = h_in.broadcast_add(&ctx.coord)?.broadcast_add(&emb)?;
        let mut adapter = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            if l > 0 {
                adapter_in = down2(&adapter_in)?;
            }
            let a = level.adapter.forward(&adapter_in)?.silu()?;
            adapter_in = a.clone();
            adapter.push(a);
        }

        // U-shaped denoiser.
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut x = h_in;
        for (l, level) in self.levels.iter().enumerate() {
            if let Some(down) = &level.down {
                x = down.forward(&down2(&x)?)?;
            }
            for block in &level.encoder {
                x = block.forward(&x, &adapter[l])?;
            }
            skips.push(x.clone());
        }
        for l in (0..self.levels.len().saturating_sub(1)).rev() {
            let level = &self.levels[l];
            let skip = &skips[l];
            let (_, _, sh, sw) = skip.dims4()?;
            let up = level.up.as_ref().expect("non-bottleneck levels upsample");
            let merge = level.merge.as_ref().expect("non-bottleneck levels merge");
            x = up.forward(&bicubic_resize_tensor(&x, (sh, sw))?)?;
            x = merge.forward(&Tensor::cat(&[&x, skip], 1)?)?;
            for block in &level.decoder {
                x = block.forward(&x, &adapter[l])?;
            }
        }
        self.out.forward(&self.out_norm.forward(&x)?.silu()?)
    }

    /// Single-image convenience wrapper around [`Denoiser::forward`].
    #[allow(clippy::too_many_arguments)]
    pub fn denoise(
        &self,
        x_t: &ImageTensor,
        t: usize,
        s: f64,
        cond: &ImageTensor,
        init_up: &ImageTensor,
        cmap: &CoordinateMap,
    ) -> Result<ImageTensor> {
        x_t.ensure_same_shape(cond)?;
        let ctx = self.image_context(cond, init_up, cmap)?;
        self.denoise_with(x_t, t, s, &ctx)
    }

    /// [`Denoiser::stage_context`] for a single image.
    pub fn image_context(&self, cond: &ImageTensor, init_up: &ImageTensor, cmap: &CoordinateMap) -> Result<StageContext> {
        cond.ensure_same_shape(init_up)?;
        let device = Device::Cpu;
        self.stage_context(
            &stack_images(&[cond], DType::F32, &device)?,
            &stack_images(&[init_up], DType::F32, &device)?,
            cmap,
        )
    }

    /// Single-image [`Denoiser::forward_with`].
    pub fn denoise_with(&self, x_t: &ImageTensor, t: usize, s: f64, ctx: &StageContext) -> Result<ImageTensor> {
        let y = self.forward_with(&stack_images(&[x_t], DType::F32, &Device::Cpu)?, &[t], &[s], ctx)?;
        ImageTensor::from_tensor(&y)
    }
}

/// Predicts the clean residual for one image.
#[allow(clippy::too_many_arguments)]
pub fn denoise(
    x_t: &ImageTensor,
    t: usize,
    s: f64,
    cond: &ImageTensor,
    init_up: &ImageTensor,
    cmap: &CoordinateMap,
    params: &DenoiserParams,
) -> Result<ImageTensor> {
    Denoiser::new(params)?.denoise(x_t, t, s, cond, init_up, cmap)
}
