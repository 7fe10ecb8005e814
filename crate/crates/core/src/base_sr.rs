//! The base continuous-resolution model `g` that anchors residual space.
//!
//! Diffusion works on `image − g(x_init)` rendered at the stage
//! resolution, and the render is added back after sampling. Bicubic mode
//! needs no weights; learned mode is a small encoder on the LR image whose
//! features are bicubically enlarged and decoded per output pixel together
//! with the pixel's offset inside its source cell.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoiser::layers::{Conv2d, EncoderBlock, InitSource, LoadSource, ParamSource};
use crate::denoiser::ParamStore;
use crate::error::{Error, Result};
use crate::image::{stack_images, unstack_images, ImageTensor};
use crate::metrics::psnr_unit;
use crate::optim::{Adam, AdamConfig};
use crate::resample::{bicubic_resize, bicubic_resize_tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnedBaseConfig {
    pub channels: usize,
    pub n_blocks: usize,
}

impl Default for LearnedBaseConfig {
    fn default() -> Self {
        Self { channels: 16, n_blocks: 2 }
    }
}

#[derive(Debug, Clone)]
struct LearnedNet {
    head: Conv2d,
    blocks: Vec<EncoderBlock>,
    fuse: Conv2d,
    out: Conv2d,
}

/// Per-pixel decoder query: offset from the nearest source pixel center on
/// each axis (scaled to `[-1, 1]`) and the source/target size ratio.
fn query_channels(source: (usize, usize), target: (usize, usize), device: &Device) -> Result<Tensor> {
    let (h, w) = target;
    let mut values = vec![0f32; 4 * h * w];
    for y in 0..h {
        for x in 0..w {
            let py = (y as f64 + 0.5) * source.0 as f64 / h as f64 - 0.5;
            let px = (x as f64 + 0.5) * source.1 as f64 / w as f64 - 0.5;
            let i = y * w + x;
            values[i] = (2.0 * (py - py.round())) as f32;
            values[h * w + i] = (2.0 * (px - px.round())) as f32;
            values[2 * h * w + i] = (source.0 as f64 / h as f64) as f32;
            values[3 * h * w + i] = (source.1 as f64 / w as f64) as f32;
        }
    }
    Ok(Tensor::from_vec(values, (1, 4, h, w), device)?)
}

impl LearnedNet {
    fn build(config: &LearnedBaseConfig, src: &mut dyn ParamSource) -> Result<Self> {
        let c = config.channels;
        Ok(Self {
            head: Conv2d::new(src, "base.head", 3, c, 3, false)?,
            blocks: (0..config.n_blocks)
                .map(|b| EncoderBlock::new(src, &format!("base.block{b}"), c))
                .collect::<Result<_>>()?,
            fuse: Conv2d::new(src, "base.fuse", c + 4 + 3, c, 1, false)?,
            out: Conv2d::new(src, "base.out", c, 3, 3, true)?,
        })
    }

    fn forward(&self, x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let mut feat = self.head.forward(x)?;
        for block in &self.blocks {
            feat = block.forward(&feat)?;
        }
        let feat = bicubic_resize_tensor(&feat, target)?;
        let base = bicubic_resize_tensor(x, target)?;
        let query = query_channels((h, w), target, x.device())?.repeat((b, 1, 1, 1))?;
        let fused = self.fuse.forward(&Tensor::cat(&[&feat, &query, &base], 1)?)?.silu()?;
        Ok((base + self.out.forward(&fused)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LearnedBase {
    pub config: LearnedBaseConfig,
    pub store: ParamStore,
    net: LearnedNet,
}

impl LearnedBase {
    /// Fresh weights; the output layer starts at zero so the untrained
    /// model reproduces bicubic exactly.
    pub fn init<R: Rng>(config: &LearnedBaseConfig, rng: &mut R) -> Result<Self> {
        if config.channels == 0 {
            return Err(Error::invalid("base model needs channels"));
        }
        let mut src = InitSource::new(rng);
        let net = LearnedNet::build(config, &mut src)?;
        Ok(Self { config: config.clone(), store: src.store, net })
    }

    pub fn from_store(config: LearnedBaseConfig, store: ParamStore) -> Result<Self> {
        let net = LearnedNet::build(&config, &mut LoadSource { store: &store })?;
        Ok(Self { config, store, net })
    }

    fn forward(&self, x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        self.net.forward(x, target)
    }
}

#[derive(Debug, Clone, Default)]
pub enum BaseSRModel {
    #[default]
    Bicubic,
    Learned(Box<LearnedBase>),
}

impl BaseSRModel {
    pub fn is_learned(&self) -> bool {
        matches!(self, BaseSRModel::Learned(_))
    }

    /// Renders `x_init` at `target`, which must be at least as large as the
    /// input on both axes.
    pub fn upsample(&self, x_init: &ImageTensor, target: (usize, usize)) -> Result<ImageTensor> {
        base_upsample(x_init, target, self)
    }
}

pub fn base_upsample(x_init: &ImageTensor, target: (usize, usize), model: &BaseSRModel) -> Result<ImageTensor> {
    let (h, w) = x_init.resolution();
    if target.0 < h || target.1 < w {
        return Err(Error::invalid(format!(
            "base model cannot shrink {h}x{w} to {}x{}",
            target.0, target.1
        )));
    }
    match model {
        BaseSRModel::Bicubic => bicubic_resize(x_init, target),
        BaseSRModel::Learned(net) => {
            if (h, w) == target {
                return Ok(x_init.clone());
            }
            let x = x_init.to_tensor(DType::F32, &Device::Cpu)?;
            ImageTensor::from_tensor(&net.forward(&x, target)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// HR training patch side.
    pub patch: usize,
    pub lr: f64,
    pub max_scale: f64,
    pub val_fraction: f64,
    /// Required validation gain over bicubic at ×2, in dB.
    pub min_gain_db: f64,
    pub seed: u64,
    pub model: LearnedBaseConfig,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            patch: 32,
            lr: 2e-3,
            max_scale: 4.0,
            val_fraction: 0.1,
            min_gain_db: 0.2,
            seed: 0,
            model: LearnedBaseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseValidation {
    pub learned_psnr: f64,
    pub bicubic_psnr: f64,
}

impl BaseValidation {
    pub fn gain(&self) -> f64 {
        self.learned_psnr - self.bicubic_psnr
    }
}

/// Mean ×2 PSNR of `model` and of plain bicubic on `val`.
pub fn validate_base(model: &BaseSRModel, val: &Dataset) -> Result<BaseValidation> {
    let (mut learned, mut bicubic) = (0.0, 0.0);
    for i in 0..val.len() {
        let hr = val.get(i)?;
        let (h, w) = hr.resolution();
        let lr = bicubic_resize(&hr, (h / 2, w / 2))?;
        learned += psnr_unit(&model.upsample(&lr, (h, w))?.clamp(-1.0, 1.0), &hr)?;
        bicubic += psnr_unit(&bicubic_resize(&lr, (h, w))?.clamp(-1.0, 1.0), &hr)?;
    }
    let n = val.len() as f64;
    Ok(BaseValidation { learned_psnr: learned / n, bicubic_psnr: bicubic / n })
}

/// Trains a learned base model with L1 regression on random patches at
/// mixed scales, then checks it beats bicubic at ×2 on a held-out split.
pub fn pretrain_base(dataset: &Dataset, config: &BaseTrainConfig) -> Result<(BaseSRModel, BaseValidation)> {
    if dataset.len() < 2 {
        return Err(Error::Dataset("base pretraining needs at least two images".into()));
    }
    let (train, val) = dataset.split(config.val_fraction.max(1.0 / dataset.len() as f64), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base = LearnedBase::init(&config.model, &mut rng)?;
    let mut adam = Adam::new(AdamConfig::default());
    let train = train.with_crop(Some((config.patch, config.patch)));
    let device = Device::Cpu;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let scale = if rng.random::<bool>() { 2.0 } else { rng.random_range(1.25..config.max_scale) };
            let lr_side = ((config.patch as f64 / scale).round() as usize).max(2);
            let mut hrs = Vec::with_capacity(chunk.len());
            let mut lrs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let hr = train.sample_patch(i, &mut rng)?;
                lrs.push(bicubic_resize(&hr, (lr_side, lr_side))?);
                hrs.push(hr);
            }
            let x = stack_images(&lrs.iter().collect::<Vec<_>>(), DType::F32, &device)?;
            let y = stack_images(&hrs.iter().collect::<Vec<_>>(), DType::F32, &device)?;
            let pred = base.forward(&x, (config.patch, config.patch))?;
            let loss = (pred - y)?.abs()?.mean_all()?;
            let value = loss.to_scalar::<f32>()? as f64;
            let grads = loss.backward()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: epoch as u64,
                    lr: config.lr,
                    grad_norm: Adam::grad_norm(&base.store, &grads)?,
                });
            }
            adam.step(&base.store, &grads, config.lr)?;
        }
    }
    let model = BaseSRModel::Learned(Box::new(base));
    let report = validate_base(&model, &val)?;
    log::info!(
        "base model: {:.3} dB vs bicubic {:.3} dB",
        report.learned_psnr,
        report.bicubic_psnr
    );
    if report.gain() < config.min_gain_db {
        return Err(Error::BaseModelTooWeak {
            learned: report.learned_psnr,
            bicubic: report.bicubic_psnr,
        });
    }
    Ok((model, report))
}

/// Upsamples a batch of same-sized images (used by the trainer).
pub(crate) fn upsample_batch(model: &BaseSRModel, images: &[ImageTensor], target: (usize, usize)) -> Result<Vec<ImageTensor>> {
    match model {
        BaseSRModel::Learned(net) if images.iter().all(|i| i.resolution() == images[0].resolution()) && images[0].resolution() != target => {
            let x = stack_images(&images.iter().collect::<Vec<_>>(), DType::F32, &Device::Cpu)?;
            unstack_images(&net.forward(&x, target)?)
        }
        _ => images.iter().map(|i| model.upsample(i, target)).collect(),
    }
}
