//! Training of the shared stage denoiser.
//!
//! Each sample picks a stage uniformly, draws that stage's scale from the
//! mixed distribution and derives the initial LR, the stage conditioning
//! and the stage target from one ground-truth patch. The network regresses
//! the clean residual with an L1 loss.

use std::fs::{self, OpenOptions};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_sr::{upsample_batch, BaseSRModel};
use crate::data::{random_crop, Dataset};
use crate::denoiser::coords::{make_coordinate_map, CoordinateMap};
use crate::denoiser::{init_params, Denoiser, DenoiserConfig, DenoiserParams};
use crate::diffusion::{forward_marginal, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::image::{stack_images, ImageTensor};
use crate::optim::{Adam, AdamConfig};
use crate::plan::{sample_train_scale, stage_count, ScaleDistribution};
use crate::resample::bicubic_resize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Side of the square ground-truth patches.
    pub crop: usize,
    pub lr: f64,
    pub lr_final: f64,
    /// Step at which the learning rate drops; defaults to `steps / 2`.
    pub lr_drop_step: Option<u64>,
    pub fixed_scale: f64,
    /// Largest total magnification seen in training; sets the stage count.
    pub max_scale: f64,
    /// Probability mass on the fixed scale.
    pub p_fixed: f64,
    /// Forward steps of noise added to the conditioning image.
    pub aug_steps: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            crop: 32,
            lr: 1e-4,
            lr_final: 1e-5,
            lr_drop_step: None,
            fixed_scale: 2.0,
            max_scale: 8.0,
            p_fixed: 0.8,
            aug_steps: 5,
            checkpoint_every: 500,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        if self.batch_size == 0 || self.crop == 0 {
            return Err(Error::Config("batch_size and crop must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.fixed_scale > 1.0) || !(self.max_scale > 1.0) {
            return Err(Error::Config("scales must exceed 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_fixed) {
            return Err(Error::Config(format!("p_fixed {} outside [0, 1]", self.p_fixed)));
        }
        if self.aug_steps >= sched.n_steps() {
            return Err(Error::Config(format!(
                "aug_steps {} must be below the {} diffusion steps",
                self.aug_steps,
                sched.n_steps()
            )));
        }
        Ok(())
    }

    pub fn drop_step(&self) -> u64 {
        self.lr_drop_step.unwrap_or(self.steps / 2)
    }

    /// Constant rate with a single drop.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.drop_step() {
            self.lr
        } else {
            self.lr_final
        }
    }

    pub fn distribution(&self) -> ScaleDistribution {
        ScaleDistribution { p_fixed: self.p_fixed, fixed_scale: self.fixed_scale }
    }

    pub fn n_stages(&self) -> usize {
        stage_count(self.max_scale, self.fixed_scale)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x_init: ImageTensor,
    /// Stage conditioning, bicubically enlarged to the stage output size.
    pub x_lr_up: ImageTensor,
    pub x_hr: ImageTensor,
    pub stage: usize,
    pub scale: f64,
    pub cmap: CoordinateMap,
}

/// Builds one training example from a ground-truth patch, which plays the
/// role of the stage output.
pub fn make_train_sample<R: Rng + ?Sized>(
    x_gt: &ImageTensor,
    dist: &ScaleDistribution,
    n_stage_max: usize,
    rng: &mut R,
) -> Result<TrainSample> {
    if n_stage_max == 0 {
        return Err(Error::invalid("need at least one stage"));
    }
    let stage = rng.random_range(1..=n_stage_max);
    let scale = sample_train_scale(dist, rng);
    let (h, w) = x_gt.resolution();
    let shrink = |factor: f64| {
        (
            (h as f64 / factor).round() as usize,
            (w as f64 / factor).round() as usize,
        )
    };
    let lr_res = shrink(scale);
    let init_res = shrink(scale * dist.fixed_scale.powi(stage as i32 - 1));
    if init_res.0 < 2 || init_res.1 < 2 {
        return Err(Error::Dataset(format!(
            "{h}x{w} ground truth is too small for stage {stage} at scale {scale:.3}"
        )));
    }
    let x_lr = bicubic_resize(x_gt, lr_res)?;
    let x_init = if stage == 1 { x_lr.clone() } else { bicubic_resize(x_gt, init_res)? };
    Ok(TrainSample {
        x_init,
        x_lr_up: bicubic_resize(&x_lr, (h, w))?,
        x_hr: x_gt.clone(),
        stage,
        scale,
        cmap: make_coordinate_map(h, w)?,
    })
}

/// Adds Gaussian noise with the variance of `k_steps` forward steps.
pub fn noise_augment<R: Rng + ?Sized>(
    x_lr_up: &ImageTensor,
    k_steps: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<ImageTensor> {
    if k_steps >= sched.n_steps() {
        return Err(Error::TimestepOutOfRange { t: k_steps, steps: sched.n_steps() });
    }
    if k_steps == 0 {
        return Ok(x_lr_up.clone());
    }
    let std = sched.kappa() * sched.eta(k_steps).sqrt();
    x_lr_up.add_scaled(&x_lr_up.gaussian_like(rng), std)
}

/// Draws a batch of random crops with random stages and scales.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &Dataset, config: &TrainConfig, rng: &mut R) -> Result<Vec<TrainSample>> {
    let dist = config.distribution();
    let n = config.n_stages();
    (0..config.batch_size)
        .map(|_| {
            let idx = rng.random_range(0..dataset.len());
            let patch = random_crop(&dataset.get(idx)?, (config.crop, config.crop), rng)?;
            make_train_sample(&patch, &dist, n, rng)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub adam: Adam,
    /// Optimizer steps taken.
    pub step: u64,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(model: &DenoiserConfig, config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        Ok(Self {
            params: init_params(model, &mut rng)?,
            adam: Adam::new(config.adam),
            step: 0,
            config: config.clone(),
        })
    }

    /// Generator for everything random in step `step`; resuming therefore
    /// needs no stored RNG state.
    pub fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step);
        rng
    }
}

/// Tensors of one step, exposed for inspection.
#[derive(Debug)]
pub struct StepTrace<'a> {
    pub target: &'a [ImageTensor],
    pub conditioning: &'a [ImageTensor],
    pub x_t: &'a [ImageTensor],
    pub timesteps: &'a [usize],
}

/// Residual-space inputs for one batch.
struct Prepared {
    target: Vec<ImageTensor>,
    cond: Vec<ImageTensor>,
    base: Vec<ImageTensor>,
    x_t: Vec<ImageTensor>,
    timesteps: Vec<usize>,
    scales: Vec<f64>,
}

fn prepare<R: Rng + ?Sized>(
    batch: &[TrainSample],
    sched: &DiffusionSchedule,
    g: &BaseSRModel,
    aug_steps: usize,
    rng: &mut R,
) -> Result<Prepared> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let res = first.x_hr.resolution();
    if let Some(bad) = batch.iter().find(|s| s.x_hr.resolution() != res || s.x_lr_up.resolution() != res) {
        return Err(Error::ShapeMismatch {
            expected: vec![3, res.0, res.1],
            actual: vec![3, bad.x_hr.height(), bad.x_hr.width()],
        });
    }
    let inits: Vec<ImageTensor> = batch.iter().map(|s| s.x_init.clone()).collect();
    let base = upsample_batch(g, &inits, res)?;
    let mut p = Prepared {
        target: Vec::with_capacity(batch.len()),
        cond: Vec::with_capacity(batch.len()),
        base: Vec::with_capacity(batch.len()),
        x_t: Vec::with_capacity(batch.len()),
        timesteps: Vec::with_capacity(batch.len()),
        scales: Vec::with_capacity(batch.len()),
    };
    for (sample, g_up) in batch.iter().zip(base) {
        let x0 = sample.x_hr.sub(&g_up)?;
        let y0 = noise_augment(&sample.x_lr_up, aug_steps, sched, rng)?.sub(&g_up)?;
        let t = rng.random_range(1..=sched.n_steps());
        let eps = x0.gaussian_like(rng);
        p.x_t.push(forward_marginal(&x0, &y0, t, sched, &eps)?);
        p.target.push(x0);
        p.cond.push(y0);
        p.base.push(g_up);
        p.timesteps.push(t);
        p.scales.push(sample.scale);
    }
    Ok(p)
}

/// Mean L1 between the network's clean-residual prediction and the target,
/// as a differentiable scalar.
fn batch_loss(net: &Denoiser, p: &Prepared, cmap: &CoordinateMap) -> Result<Tensor> {
    let dev = Device::Cpu;
    let stack = |v: &[ImageTensor]| stack_images(&v.iter().collect::<Vec<_>>(), DType::F32, &dev);
    let pred = net.forward(&stack(&p.x_t)?, &p.timesteps, &p.scales, &stack(&p.cond)?, &stack(&p.base)?, cmap)?;
    Ok((pred - stack(&p.target)?)?.abs()?.mean_all()?)
}

/// One optimizer step; returns the pre-update loss.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[TrainSample],
    sched: &DiffusionSchedule,
    g: &BaseSRModel,
    rng: &mut R,
) -> Result<f64> {
    train_step_traced(state, batch, sched, g, rng, &mut |_| {})
}

/// [`train_step`] with a hook that sees the tensors entering the loss.
pub fn train_step_traced<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[TrainSample],
    sched: &DiffusionSchedule,
    g: &BaseSRModel,
    rng: &mut R,
    hook: &mut dyn FnMut(&StepTrace),
) -> Result<f64> {
    let p = prepare(batch, sched, g, state.config.aug_steps, rng)?;
    hook(&StepTrace {
        target: &p.target,
        conditioning: &p.cond,
        x_t: &p.x_t,
        timesteps: &p.timesteps,
    });
    let net = Denoiser::new(&state.params)?;
    let loss = batch_loss(&net, &p, &batch[0].cmap)?;
    let value = loss.to_scalar::<f32>()? as f64;
    let grads = loss.backward()?;
    let lr = state.config.lr_at(state.step);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            lr,
            grad_norm: Adam::grad_norm(&state.params.store, &grads)?,
        });
    }
    state.adam.step(&state.params.store, &grads, lr)?;
    state.step += 1;
    Ok(value)
}

/// Loss of the current parameters on a batch, without updating anything.
pub fn evaluate_loss<R: Rng + ?Sized>(
    state: &TrainState,
    batch: &[TrainSample],
    sched: &DiffusionSchedule,
    g: &BaseSRModel,
    rng: &mut R,
) -> Result<f64> {
    let p = prepare(batch, sched, g, state.config.aug_steps, rng)?;
    let net = Denoiser::new(&state.params)?;
    Ok(batch_loss(&net, &p, &batch[0].cmap)?.to_scalar::<f32>()? as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Seconds since the start of this run.
    pub wallclock: f64,
}

/// Where a training run writes its log and checkpoints.
#[derive(Clone)]
pub struct RunOutputs<'a> {
    pub dir: &'a Path,
    /// Called to persist a checkpoint at the given path.
    pub save: &'a dyn Fn(&TrainState, &Path) -> Result<()>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

/// Trains from `state.step` up to `state.config.steps`.
///
/// With outputs, log rows are appended to `train_log.csv` and checkpoints
/// written every `checkpoint_every` steps plus once at the end.
pub fn run_training(
    state: &mut TrainState,
    dataset: &Dataset,
    sched: &DiffusionSchedule,
    g: &BaseSRModel,
    outputs: Option<&RunOutputs>,
) -> Result<Vec<LogRow>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    state.config.validate(sched)?;
    if state.params.config.max_timestep != sched.n_steps() {
        return Err(Error::Config(format!(
            "denoiser expects {} steps, schedule has {}",
            state.params.config.max_timestep,
            sched.n_steps()
        )));
    }
    let mut writer = match outputs {
        Some(out) => {
            fs::create_dir_all(out.dir)?;
            let path = out.dir.join(LOG_FILE);
            let fresh = !path.exists() || state.step == 0;
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)?;
            Some(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
        }
        None => None,
    };
    let start = Instant::now();
    let mut rows = Vec::new();
    while state.step < state.config.steps {
        let mut rng = state.step_rng();
        let batch = sample_batch(dataset, &state.config, &mut rng)?;
        let step = state.step;
        let lr = state.config.lr_at(step);
        let loss = train_step(state, &batch, sched, g, &mut rng)?;
        let row = LogRow { step, loss, lr, wallclock: start.elapsed().as_secs_f64() };
        if let Some(w) = writer.as_mut() {
            w.serialize(row)?;
            w.flush()?;
        }
        log::debug!("step {step} loss {loss:.5} lr {lr:e}");
        rows.push(row);
        if let Some(out) = outputs {
            let every = state.config.checkpoint_every;
            if every > 0 && state.step % every == 0 && state.step < state.config.steps {
                (out.save)(state, &out.dir.join(format!("step_{:07}.safetensors", state.step)))?;
            }
        }
    }
    if let Some(out) = outputs {
        (out.save)(state, &out.dir.join(LAST_CHECKPOINT))?;
    }
    Ok(rows)
}
