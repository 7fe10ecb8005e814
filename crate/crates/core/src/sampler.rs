//! Cascaded inference.
//!
//! Every stage enlarges the previous output by its planned factor with a
//! full reverse chain in residual space, optionally pulling each clean
//! estimate toward the stage input with self-consistency guidance.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_sr::BaseSRModel;
use crate::denoiser::coords::make_coordinate_map;
use crate::denoiser::{Denoiser, DenoiserParams};
use crate::diffusion::{reverse_step, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::guidance::{scg_gradient, scg_loss, BicubicDown, Downsample};
use crate::image::ImageTensor;
use crate::plan::{plan_scales, ScalePlan, Strategy, DEFAULT_FIXED_SCALE};
use crate::resample::bicubic_resize;

/// Smallest accepted input side.
pub const MIN_INPUT_SIDE: usize = 16;

/// What each stage's clean estimate is kept consistent with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScgReference {
    /// The previous stage's output (the input image for stage 1).
    #[default]
    #[serde(alias = "prev")]
    PreviousStage,
    /// Always the input image.
    #[serde(alias = "init")]
    InitialLr,
    Off,
}

impl ScgReference {
    pub fn short_name(self) -> &'static str {
        match self {
            ScgReference::PreviousStage => "prev",
            ScgReference::InitialLr => "init",
            ScgReference::Off => "off",
        }
    }
}

impl fmt::Display for ScgReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for ScgReference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prev" | "previous_stage" => Ok(ScgReference::PreviousStage),
            "init" | "initial_lr" => Ok(ScgReference::InitialLr),
            "off" => Ok(ScgReference::Off),
            other => Err(Error::invalid(format!("unknown guidance reference {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Guidance strength per stage; a single value applies to all stages
    /// and the last value repeats for stages beyond the list.
    pub zeta: Vec<f64>,
    pub seed: u64,
    pub reference: ScgReference,
    pub strategy: Strategy,
    pub fixed_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            zeta: vec![0.2],
            seed: 0,
            reference: ScgReference::PreviousStage,
            strategy: Strategy::RemainderLast,
            fixed_scale: DEFAULT_FIXED_SCALE,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.zeta.is_empty() {
            return Err(Error::invalid("at least one guidance strength is required"));
        }
        if let Some(z) = self.zeta.iter().find(|z| !(**z >= 0.0 && z.is_finite())) {
            return Err(Error::invalid(format!("guidance strength {z} must be >= 0")));
        }
        Ok(())
    }

    /// Strength for 0-based stage `stage`; zero when guidance is off.
    pub fn zeta_for(&self, stage: usize) -> f64 {
        if self.reference == ScgReference::Off {
            return 0.0;
        }
        self.zeta[stage.min(self.zeta.len() - 1)]
    }
}

#[derive(Debug, Clone)]
pub struct SrOutput {
    pub image: ImageTensor,
    /// Output of every stage, in order; the last equals `image`.
    pub stages: Vec<ImageTensor>,
    pub plan: ScalePlan,
    pub denoiser_calls: usize,
}

/// Enlarges `x_init` by `scale` through the planned cascade.
pub fn super_resolve(
    x_init: &ImageTensor,
    scale: f64,
    params: &DenoiserParams,
    g: &BaseSRModel,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<SrOutput> {
    cfg.validate()?;
    if !(scale > 1.0) {
        return Err(Error::invalid(format!("scale {scale} must be greater than 1")));
    }
    let (h, w) = x_init.resolution();
    if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
        return Err(Error::invalid(format!("input {h}x{w} is smaller than {MIN_INPUT_SIDE} px")));
    }
    if x_init.channels() != 3 {
        return Err(Error::invalid(format!("expected an RGB image, got {} channels", x_init.channels())));
    }
    if !params.store.all_finite()? {
        return Err(Error::invalid("denoiser parameters contain non-finite values"));
    }
    if params.config.max_timestep != sched.n_steps() {
        return Err(Error::invalid(format!(
            "denoiser was trained for {} steps, schedule has {}",
            params.config.max_timestep,
            sched.n_steps()
        )));
    }
    let plan = plan_scales(scale, cfg.fixed_scale, (h, w), cfg.strategy)?;
    let net = Denoiser::new(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stages: Vec<ImageTensor> = Vec::with_capacity(plan.n_stages());
    let mut calls = 0;
    for (k, &res) in plan.stage_resolutions.iter().enumerate() {
        let prev = stages.last().unwrap_or(x_init);
        let stage_scale = plan.stage_scales[k];
        let g_up = g.upsample(x_init, res)?;
        let cond = bicubic_resize(prev, res)?.sub(&g_up)?;
        let ctx = net.image_context(&cond, &g_up, &make_coordinate_map(res.0, res.1)?)?;
        let zeta = cfg.zeta_for(k);
        let reference = match cfg.reference {
            ScgReference::PreviousStage => prev,
            ScgReference::InitialLr | ScgReference::Off => x_init,
        };
        let down = BicubicDown::new(reference.resolution());
        let t_max = sched.n_steps();
        let mut x_t = cond.add_scaled(&cond.gaussian_like(&mut rng), sched.forward_std(t_max))?;
        for t in (1..=t_max).rev() {
            let mut x0_hat = net.denoise_with(&x_t, t, stage_scale, &ctx)?;
            calls += 1;
            if zeta > 0.0 {
                // The loss acts on the image, x̂0 + g; g is constant so the
                // gradient is the same with respect to x̂0.
                let grad = scg_gradient(&x0_hat.add(&g_up)?, reference, &down)?;
                x0_hat = x0_hat.add_scaled(&grad, -zeta)?;
            }
            let noise = x_t.gaussian_like(&mut rng);
            x_t = reverse_step(&x_t, &x0_hat, t, sched, &noise)?;
        }
        let out = x_t.add(&g_up)?.clamp(-1.0, 1.0);
        if !out.is_finite() {
            return Err(Error::invalid(format!("stage {} produced non-finite values", k + 1)));
        }
        stages.push(out);
    }
    let image = stages.last().cloned().expect("plans have at least one stage");
    Ok(SrOutput { image, stages, plan, denoiser_calls: calls })
}

/// RMS of `reference − down(x_sr)`: how far an output drifts from the image
/// it was enlarged from.
pub fn self_consistency_residual(x_sr: &ImageTensor, reference: &ImageTensor, down: &dyn Downsample) -> Result<f64> {
    Ok((scg_loss(x_sr, reference, down)? / reference.numel() as f64).sqrt())
}
