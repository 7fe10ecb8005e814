//! The canonical antialiased bicubic resampler.
//!
//! Every resize in the crate goes through [`ResizeWeights`]: training-pair
//! synthesis, the bicubic base model, feature upsampling inside the networks
//! and the downsampling operator used by self-consistency guidance. The
//! resize is separable, so a 2-D resize is `R_h · X · R_wᵀ` with one dense
//! weight matrix per axis. Expressing it as matrix products also gives the
//! tensor path exact automatic-differentiation adjoints.

use candle_core::Tensor;
use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Catmull-Rom parameter of the cubic convolution kernel.
pub const CUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`, support `[-2, 2]`.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Dense `out_len × in_len` interpolation matrix for one axis.
///
/// Output pixel `i` samples the input at `(i + 0.5) * in/out - 0.5`. When
/// shrinking, the kernel is stretched by `in/out` so it acts as a low-pass
/// filter. Taps falling outside the input are clamped to the edge pixel, and
/// each row is normalized to sum to one.
pub fn axis_weights(in_len: usize, out_len: usize) -> Result<Array2<f64>> {
    if in_len == 0 || out_len == 0 {
        return Err(Error::invalid(format!(
            "resize axis {in_len} -> {out_len} must be positive"
        )));
    }
    let mut weights = Array2::zeros((out_len, in_len));
    if in_len == out_len {
        weights.diag_mut().fill(1.0);
        return Ok(weights);
    }
    let ratio = in_len as f64 / out_len as f64;
    let support = ratio.max(1.0);
    let last = in_len as isize - 1;
    for i in 0..out_len {
        let center = (i as f64 + 0.5) * ratio - 0.5;
        let lo = (center - 2.0 * support).floor() as isize;
        let hi = (center + 2.0 * support).ceil() as isize;
        let mut row_sum = 0.0;
        for j in lo..=hi {
            let w = cubic_kernel((j as f64 - center) / support);
            if w == 0.0 {
                continue;
            }
            let src = j.clamp(0, last) as usize;
            weights[[i, src]] += w;
            row_sum += w;
        }
        weights.row_mut(i).mapv_inplace(|w| w / row_sum);
    }
    Ok(weights)
}

/// Per-axis weights for a 2-D resize.
#[derive(Debug, Clone)]
pub struct ResizeWeights {
    pub rows: Array2<f64>,
    pub cols: Array2<f64>,
}

impl ResizeWeights {
    pub fn new(from: (usize, usize), to: (usize, usize)) -> Result<Self> {
        Ok(Self {
            rows: axis_weights(from.0, to.0)?,
            cols: axis_weights(from.1, to.1)?,
        })
    }

    pub fn source(&self) -> (usize, usize) {
        (self.rows.ncols(), self.cols.ncols())
    }

    pub fn target(&self) -> (usize, usize) {
        (self.rows.nrows(), self.cols.nrows())
    }

    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let (c, h, w) = img.dims();
        if (h, w) != self.source() {
            return Err(Error::ShapeMismatch {
                expected: vec![c, self.source().0, self.source().1],
                actual: vec![c, h, w],
            });
        }
        let (th, tw) = self.target();
        let cols_t = self.cols.t();
        let mut out = ndarray::Array3::zeros((c, th, tw));
        for (src, mut dst) in img.data().axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let tmp = self.rows.dot(&src);
            dst.assign(&tmp.dot(&cols_t));
        }
        Ok(ImageTensor::new(out))
    }

    /// Resizes the last two axes of a tensor, keeping it on the autodiff tape.
    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let n = dims.len();
        if n < 2 || (dims[n - 2], dims[n - 1]) != self.source() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.source().0, self.source().1],
                actual: dims.to_vec(),
            });
        }
        let dtype = x.dtype();
        let device = x.device();
        let to_tensor = |m: &Array2<f64>| -> Result<Tensor> {
            let (r, c) = m.dim();
            let values: Vec<f64> = m.iter().copied().collect();
            Ok(Tensor::from_vec(values, (r, c), device)?.to_dtype(dtype)?)
        };
        let rows = to_tensor(&self.rows)?;
        let cols_t = to_tensor(&self.cols)?.t()?.contiguous()?;
        let x = x.contiguous()?;
        let tmp = x.broadcast_matmul(&cols_t)?;
        Ok(rows.broadcast_matmul(&tmp)?)
    }
}

/// Antialiased bicubic resize of an image to `(height, width)`.
pub fn bicubic_resize(img: &ImageTensor, target: (usize, usize)) -> Result<ImageTensor> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::invalid(format!("non-positive resize target {target:?}")));
    }
    if img.resolution() == target {
        return Ok(img.clone());
    }
    ResizeWeights::new(img.resolution(), target)?.apply(img)
}

/// Differentiable bicubic resize of the last two axes of `x`.
pub fn bicubic_resize_tensor(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let dims = x.dims();
    let n = dims.len();
    if n < 2 {
        return Err(Error::invalid("resize needs at least two axes"));
    }
    let source = (dims[n - 2], dims[n - 1]);
    if source == target {
        return Ok(x.clone());
    }
    ResizeWeights::new(source, target)?.apply_tensor(x)
}
