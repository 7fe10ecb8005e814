//! Residual-shifting diffusion in residual image space.
//!
//! The forward marginal moves an HR residual `x0` toward the LR residual `y0`:
//!
//! ```text
//! q(x_t | x0, y0) = N(x0 + η_t (y0 − x0), κ² η_t I)
//! ```
//!
//! and the reverse transition, given a clean estimate `x̂0`, is
//!
//! ```text
//! x_{t−1} = (η_{t−1}/η_t) x_t + (α_t/η_t) x̂0 + κ √((η_{t−1}/η_t) α_t) ε
//! ```
//!
//! with `α_t = η_t − η_{t−1}` and `η_0 = 0`. Timesteps are 1-based.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const DEFAULT_STEPS: usize = 15;
pub const DEFAULT_KAPPA: f64 = 2.0;
pub const DEFAULT_ETA_MIN: f64 = 1e-3;
pub const DEFAULT_ETA_MAX: f64 = 0.999;

/// Shift schedule `{η_t}` plus noise level `κ`.
///
/// Serialized as explicit arrays so a checkpoint samples identically no
/// matter how the schedule was constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct DiffusionSchedule {
    eta: Vec<f64>,
    alpha: Vec<f64>,
    kappa: f64,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    n_steps: usize,
    eta: Vec<f64>,
    kappa: f64,
}

impl TryFrom<ScheduleRepr> for DiffusionSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        if r.eta.len() != r.n_steps {
            return Err(Error::invalid(format!(
                "schedule lists {} etas for {} steps",
                r.eta.len(),
                r.n_steps
            )));
        }
        DiffusionSchedule::from_eta(r.eta, r.kappa)
    }
}

impl From<DiffusionSchedule> for ScheduleRepr {
    fn from(s: DiffusionSchedule) -> Self {
        ScheduleRepr {
            n_steps: s.n_steps(),
            eta: s.eta,
            kappa: s.kappa,
        }
    }
}

impl DiffusionSchedule {
    /// Validates an explicit `η_1..η_T` sequence.
    pub fn from_eta(eta: Vec<f64>, kappa: f64) -> Result<Self> {
        if eta.len() < 2 {
            return Err(Error::invalid("schedule needs at least two steps"));
        }
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::invalid(format!("kappa {kappa} must be positive")));
        }
        if !eta.iter().all(|e| e.is_finite() && *e > 0.0 && *e <= 1.0) {
            return Err(Error::invalid("eta values must lie in (0, 1]"));
        }
        if eta.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("eta must be strictly increasing"));
        }
        if eta[0] > 1e-2 {
            return Err(Error::invalid(format!("eta_1 = {} must be <= 1e-2", eta[0])));
        }
        if eta[eta.len() - 1] < 0.99 {
            return Err(Error::invalid(format!(
                "eta_T = {} must be >= 0.99",
                eta[eta.len() - 1]
            )));
        }
        let alpha = (0..eta.len())
            .map(|i| if i == 0 { eta[0] } else { eta[i] - eta[i - 1] })
            .collect();
        Ok(Self { eta, alpha, kappa })
    }

    pub fn n_steps(&self) -> usize {
        self.eta.len()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// `η_t` for `t` in `0..=T`, with `η_0 = 0`.
    pub fn eta(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.eta[t - 1]
        }
    }

    /// `α_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn etas(&self) -> &[f64] {
        &self.eta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.n_steps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.n_steps() });
        }
        Ok(())
    }

    /// Standard deviation of the forward marginal at `t`.
    pub fn forward_std(&self, t: usize) -> f64 {
        self.kappa * self.eta(t).sqrt()
    }

    /// Standard deviation of the reverse transition `t → t−1`.
    pub fn reverse_std(&self, t: usize) -> f64 {
        self.kappa * (self.eta(t - 1) / self.eta(t) * self.alpha(t)).sqrt()
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_STEPS, DEFAULT_KAPPA, DEFAULT_ETA_MIN, DEFAULT_ETA_MAX)
            .expect("default schedule parameters are valid")
    }
}

/// Schedule whose `√η_t` is geometric between `√eta_min` and `√eta_max`.
pub fn build_schedule(steps: usize, kappa: f64, eta_min: f64, eta_max: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!("need at least 2 steps, got {steps}")));
    }
    if !(eta_min > 0.0 && eta_min < eta_max && eta_max <= 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < eta_min < eta_max <= 1, got {eta_min}, {eta_max}"
        )));
    }
    let lo = eta_min.sqrt();
    let ratio = eta_max.sqrt() / lo;
    let last = steps - 1;
    let eta = (0..steps)
        .map(|i| match i {
            0 => eta_min,
            i if i == last => eta_max,
            i => (lo * ratio.powf(i as f64 / last as f64)).powi(2),
        })
        .collect();
    DiffusionSchedule::from_eta(eta, kappa)
}

/// Draws `x_t ~ q(x_t | x0, y0)` using the supplied standard-normal `noise`.
pub fn forward_marginal(
    x0: &ImageTensor,
    y0: &ImageTensor,
    t: usize,
    sched: &DiffusionSchedule,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    sched.check_timestep(t)?;
    x0.ensure_same_shape(y0)?;
    x0.ensure_same_shape(noise)?;
    let eta = sched.eta(t);
    let std = sched.forward_std(t);
    let mut out = x0.data().clone();
    Zip::from(&mut out)
        .and(y0.data())
        .and(noise.data())
        .for_each(|o, &y, &n| *o = *o + eta * (y - *o) + std * n);
    Ok(ImageTensor::new(out))
}

/// One reverse transition `x_t → x_{t−1}` given the clean estimate `x0_hat`.
pub fn reverse_step(
    x_t: &ImageTensor,
    x0_hat: &ImageTensor,
    t: usize,
    sched: &DiffusionSchedule,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    sched.check_timestep(t)?;
    x_t.ensure_same_shape(x0_hat)?;
    x_t.ensure_same_shape(noise)?;
    if t == 1 {
        // η_0 = 0 and α_1 = η_1: the mean collapses onto x̂0, the variance to 0.
        return Ok(x0_hat.clone());
    }
    let eta_t = sched.eta(t);
    let keep = sched.eta(t - 1) / eta_t;
    let pull = sched.alpha(t) / eta_t;
    let std = sched.reverse_std(t);
    let mut out = x_t.data().clone();
    Zip::from(&mut out)
        .and(x0_hat.data())
        .and(noise.data())
        .for_each(|o, &x0, &n| *o = keep * *o + pull * x0 + std * n);
    Ok(ImageTensor::new(out))
}
