//! The image payload shared by every module.
//!
//! Images are `channels × height × width` arrays of `f64` in the normalized
//! range `[-1, 1]`. Residual images (an image minus the base-model render)
//! use the same type but are not range-limited.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_same_dims, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(Array3::zeros((channels, height, width)))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Self {
        Self::new(Array3::from_shape_fn((channels, height, width), f))
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let data = Array3::from_shape_vec((channels, height, width), values)
            .map_err(|e| Error::invalid(format!("image from vec: {e}")))?;
        Ok(Self::new(data))
    }

    /// Standard-normal noise with the given shape.
    pub fn gaussian<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(channels, height, width, |_| rng.sample(StandardNormal))
    }

    pub fn gaussian_like<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let (c, h, w) = self.dims();
        Self::gaussian(c, h, w, rng)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// `(height, width)`.
    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.dims();
        (h, w)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        ensure_same_dims(self.data.shape(), other.data.shape())
    }

    pub fn add(&self, other: &ImageTensor) -> Result<ImageTensor> {
        self.ensure_same_shape(other)?;
        Ok(Self::new(&self.data + &other.data))
    }

    pub fn sub(&self, other: &ImageTensor) -> Result<ImageTensor> {
        self.ensure_same_shape(other)?;
        Ok(Self::new(&self.data - &other.data))
    }

    pub fn scale(&self, factor: f64) -> ImageTensor {
        Self::new(&self.data * factor)
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &ImageTensor, factor: f64) -> Result<ImageTensor> {
        self.ensure_same_shape(other)?;
        let mut out = self.data.clone();
        Zip::from(&mut out)
            .and(&other.data)
            .for_each(|o, &b| *o += factor * b);
        Ok(Self::new(out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        Self::new(self.data.mapv(f))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> ImageTensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    pub fn squared_distance(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b)))
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0f64, |acc, &a, &b| acc.max((a - b).abs())))
    }

    /// Crops the window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageTensor> {
        let (_, h, w) = self.dims();
        if top + height > h || left + width > w || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "crop {height}x{width}@({top},{left}) outside {h}x{w}"
            )));
        }
        let view = self
            .data
            .slice(ndarray::s![.., top..top + height, left..left + width]);
        Ok(Self::new(view.to_owned()))
    }

    /// Converts to a `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (c, h, w) = self.dims();
        let values: Vec<f64> = self.data.iter().copied().collect();
        let t = Tensor::from_vec(values, (1, c, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(C, H, W)` or `(1, C, H, W)` tensors of any float dtype.
    pub fn from_tensor(tensor: &Tensor) -> Result<ImageTensor> {
        let t = match tensor.rank() {
            3 => tensor.clone(),
            4 if tensor.dim(0)? == 1 => tensor.squeeze(0)?,
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![1, 0, 0, 0],
                    actual: tensor.dims().to_vec(),
                })
            }
        };
        let (c, h, w) = t.dims3()?;
        let values = t
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Self::from_vec(c, h, w, values)
    }
}

/// Stacks same-shaped images into a `(B, C, H, W)` tensor.
pub fn stack_images(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let (c, h, w) = first.dims();
    let mut values = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        first.ensure_same_shape(img)?;
        values.extend(img.data().iter().copied());
    }
    let t = Tensor::from_vec(values, (images.len(), c, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Splits a `(B, C, H, W)` tensor back into images.
pub fn unstack_images(tensor: &Tensor) -> Result<Vec<ImageTensor>> {
    let (b, _, _, _) = tensor.dims4()?;
    (0..b)
        .map(|i| ImageTensor::from_tensor(&tensor.narrow(0, i, 1)?))
        .collect()
}
