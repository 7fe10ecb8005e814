use std::f64::consts::PI;

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};

/// Normalized pixel-center coordinates of an `H × W` grid.
///
/// Channel 0 holds the vertical coordinate and channel 1 the horizontal
/// one; both lie strictly inside `(-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMap {
    pub coords: Array3<f64>,
    pub cell_size: (f64, f64),
}

impl CoordinateMap {
    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.coords.dim();
        (h, w)
    }

    /// Same shape, all coordinates zero.
    pub fn zeroed(&self) -> Self {
        Self {
            coords: Array3::zeros(self.coords.dim()),
            cell_size: self.cell_size,
        }
    }
}

/// Center of pixel `i` on an axis of length `n`.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

pub fn make_coordinate_map(height: usize, width: usize) -> Result<CoordinateMap> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "coordinate map needs a positive size, got {height}x{width}"
        )));
    }
    let coords = Array3::from_shape_fn((2, height, width), |(c, y, x)| {
        if c == 0 {
            pixel_center(y, height)
        } else {
            pixel_center(x, width)
        }
    });
    Ok(CoordinateMap {
        coords,
        cell_size: (2.0 / height as f64, 2.0 / width as f64),
    })
}

/// `[sin(2^b π u), cos(2^b π u)]` for every band `b` and axis `u`,
/// giving `4 · n_bands` channels ordered band-major, then axis, then
/// sin/cos.
pub fn fourier_encode(cmap: &CoordinateMap, n_bands: usize) -> Result<Array3<f64>> {
    if n_bands == 0 {
        return Err(Error::invalid("need at least one Fourier band"));
    }
    let (h, w) = cmap.resolution();
    let mut out = Array3::zeros((4 * n_bands, h, w));
    for b in 0..n_bands {
        let freq = (1u64 << b) as f64 * PI;
        for axis in 0..2 {
            let u = cmap.coords.index_axis(Axis(0), axis);
            let base = 4 * b + 2 * axis;
            out.index_axis_mut(Axis(0), base)
                .assign(&u.mapv(|v| (freq * v).sin()));
            out.index_axis_mut(Axis(0), base + 1)
                .assign(&u.mapv(|v| (freq * v).cos()));
        }
    }
    Ok(out)
}
