//! Self-consistency guidance: one gradient step on
//! `‖reference − A(x̂0)‖²` with respect to the clean estimate `x̂0`.
//!
//! `A` is any [`Downsample`] operator written with candle ops, so the
//! gradient comes from reverse-mode autodiff rather than a hand-derived
//! adjoint.

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{ensure_same_dims, Error, Result};
use crate::image::ImageTensor;
use crate::resample::bicubic_resize_tensor;

/// A differentiable map from a `(B, C, H, W)` tensor to a lower resolution.
pub trait Downsample {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
}

/// The canonical bicubic resampler targeting a fixed resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BicubicDown {
    pub height: usize,
    pub width: usize,
}

impl BicubicDown {
    pub fn new(target: (usize, usize)) -> Self {
        Self { height: target.0, width: target.1 }
    }
}

impl Downsample for BicubicDown {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        bicubic_resize_tensor(x, (self.height, self.width))
    }
}

/// Non-overlapping `factor × factor` average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeanPool {
    pub factor: usize,
}

impl Downsample for MeanPool {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.avg_pool2d(self.factor)?)
    }
}

fn to_f64(img: &ImageTensor) -> Result<Tensor> {
    img.to_tensor(DType::F64, &Device::Cpu)
}

fn loss_tensor(x: &Tensor, reference: &Tensor, down: &dyn Downsample) -> Result<Tensor> {
    let projected = down.apply(x)?;
    ensure_same_dims(reference.dims(), projected.dims())?;
    Ok((reference - projected)?.sqr()?.sum_all()?)
}

/// `‖reference − down(x0_hat)‖₂²`.
pub fn scg_loss(x0_hat: &ImageTensor, reference: &ImageTensor, down: &dyn Downsample) -> Result<f64> {
    let x = to_f64(x0_hat)?;
    let r = to_f64(reference)?;
    Ok(loss_tensor(&x, &r, down)?.to_scalar::<f64>()?)
}

/// Gradient of [`scg_loss`] with respect to `x0_hat`.
pub fn scg_gradient(
    x0_hat: &ImageTensor,
    reference: &ImageTensor,
    down: &dyn Downsample,
) -> Result<ImageTensor> {
    let x = Var::from_tensor(&to_f64(x0_hat)?)?;
    let r = to_f64(reference)?;
    let loss = loss_tensor(x.as_tensor(), &r, down)?;
    let grads = loss.backward()?;
    let g = grads
        .get(x.as_tensor())
        .ok_or_else(|| Error::invalid("guidance loss does not depend on the estimate"))?;
    ImageTensor::from_tensor(g)
}

/// `x0_hat − zeta · ∇ scg_loss`.
pub fn scg_update(
    x0_hat: &ImageTensor,
    reference: &ImageTensor,
    zeta: f64,
    down: &dyn Downsample,
) -> Result<ImageTensor> {
    if !(zeta >= 0.0) || !zeta.is_finite() {
        return Err(Error::invalid(format!("guidance strength {zeta} must be >= 0")));
    }
    if zeta == 0.0 {
        return Ok(x0_hat.clone());
    }
    let grad = scg_gradient(x0_hat, reference, down)?;
    x0_hat.add_scaled(&grad, -zeta)
}
