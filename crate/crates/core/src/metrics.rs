//! PSNR, SSIM and the cross-scale SelfSSIM consistency matrix.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::resample::bicubic_resize;

/// Side of the Gaussian SSIM window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10 log10(peak² / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak {peak} must be positive")));
    }
    let mse = a.squared_distance(b)? / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR of two `[-1, 1]` images measured on the `[0, 1]` scale.
pub fn psnr_unit(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    // Halving both images halves every difference: peak 2 on [-1, 1].
    psnr(a, b, 2.0)
}

/// ITU-R BT.601 luma of a `[-1, 1]` image, mapped to `[0, 1]`.
pub fn luminance(img: &ImageTensor) -> Array2<f64> {
    let d = img.data();
    let to_unit = |v: f64| (v + 1.0) * 0.5;
    if img.channels() == 3 {
        let r = d.index_axis(Axis(0), 0);
        let g = d.index_axis(Axis(0), 1);
        let b = d.index_axis(Axis(0), 2);
        let mut y = Array2::zeros(img.resolution());
        ndarray::Zip::from(&mut y)
            .and(&r)
            .and(&g)
            .and(&b)
            .for_each(|y, &r, &g, &b| *y = 0.299 * to_unit(r) + 0.587 * to_unit(g) + 0.114 * to_unit(b));
        y
    } else {
        d.index_axis(Axis(0), 0).mapv(to_unit)
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for xo in 0..ow {
            rows[[y, xo]] = (0..n).map(|i| k[i] * x[[y, xo + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for yo in 0..oh {
        for xo in 0..ow {
            out[[yo, xo]] = (0..n).map(|i| k[i] * rows[[yo + i, xo]]).sum();
        }
    }
    out
}

fn ssim_planes(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let mut total = 0.0;
    for idx in ndarray::indices(mu_a.dim()) {
        let (ma, mb) = (mu_a[idx], mu_b[idx]);
        let va = aa[idx] - ma * ma;
        let vb = bb[idx] - mb * mb;
        let cov = ab[idx] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Mean SSIM on luminance with an 11×11 Gaussian window (σ = 1.5).
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = a.resolution();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    Ok(ssim_planes(&luminance(a), &luminance(b)))
}

/// Pairwise SelfSSIM between outputs produced at different scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyMatrix {
    pub scales: Vec<f64>,
    pub values: Array2<f64>,
}

impl ConsistencyMatrix {
    /// Value for a pair of scales, looked up by value.
    pub fn get(&self, row: f64, col: f64) -> Option<f64> {
        let i = self.scales.iter().position(|&s| s == row)?;
        let j = self.scales.iter().position(|&s| s == col)?;
        Some(self.values[[i, j]])
    }

    /// Table with one row and column per scale, three decimals.
    pub fn render(&self) -> String {
        let label = |s: f64| format!("x{}", trim_float(s));
        let mut out = format!("{:>8}", "");
        for &s in &self.scales {
            out.push_str(&format!("{:>8}", label(s)));
        }
        out.push('\n');
        for (i, &s) in self.scales.iter().enumerate() {
            out.push_str(&format!("{:>8}", label(s)));
            for j in 0..self.scales.len() {
                out.push_str(&format!("{:>8.3}", self.values[[i, j]]));
            }
            out.push('\n');
        }
        out
    }

    /// Element-wise mean of several matrices over the same scales.
    pub fn mean(mats: &[ConsistencyMatrix]) -> Result<ConsistencyMatrix> {
        let first = mats.first().ok_or_else(|| Error::invalid("no matrices to average"))?;
        let mut sum = Array2::zeros(first.values.dim());
        for m in mats {
            if m.scales != first.scales {
                return Err(Error::invalid("matrices cover different scales"));
            }
            sum += &m.values;
        }
        sum /= mats.len() as f64;
        for i in 0..first.scales.len() {
            sum[[i, i]] = 1.0;
        }
        Ok(ConsistencyMatrix { scales: first.scales.clone(), values: sum })
    }
}

pub(crate) fn trim_float(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Entry `(a, b)` is the SSIM between the lower-scale output and the
/// higher-scale output resampled onto the lower-scale grid. The diagonal
/// is exactly 1.
pub fn self_ssim(outputs: &[(f64, ImageTensor)]) -> Result<ConsistencyMatrix> {
    if outputs.len() < 2 {
        return Err(Error::invalid("SelfSSIM needs outputs at two or more scales"));
    }
    let n = outputs.len();
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        values[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let (si, ref a) = outputs[i];
            let (sj, ref b) = outputs[j];
            let (low, high) = if si <= sj { (a, b) } else { (b, a) };
            let projected = bicubic_resize(high, low.resolution())?;
            let v = ssim(low, &projected)?;
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    Ok(ConsistencyMatrix {
        scales: outputs.iter().map(|(s, _)| *s).collect(),
        values,
    })
}
