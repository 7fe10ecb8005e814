//! PNG ingestion and serialization.
//!
//! 8-bit values map to `[-1, 1]` as `v / 127.5 − 1`; saving inverts that
//! with round-half-to-even, so `load ∘ save ∘ load` is the identity.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub fn byte_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round_ties_even().clamp(0.0, 255.0) as u8
}

pub fn from_rgb8(img: &RgbImage) -> ImageTensor {
    let (w, h) = img.dimensions();
    ImageTensor::from_fn(3, h as usize, w as usize, |(c, y, x)| {
        byte_to_unit(img.get_pixel(x as u32, y as u32)[c])
    })
}

pub fn to_rgb8(img: &ImageTensor) -> Result<RgbImage> {
    let (c, h, w) = img.dims();
    if c != 3 && c != 1 {
        return Err(Error::invalid(format!("cannot encode {c}-channel image")));
    }
    let data = img.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| unit_to_byte(data[[ch.min(c - 1), y as usize, x as usize]]);
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Loads an 8-bit PNG as a 3-channel image in `[-1, 1]`.
///
/// Grayscale and alpha inputs are converted to RGB with a warning; 16-bit
/// and float inputs are rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let dynamic: DynamicImage = ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let rgb = match dynamic.color() {
        ColorType::Rgb8 => dynamic.into_rgb8(),
        ColorType::L8 | ColorType::La8 | ColorType::Rgba8 => {
            log::warn!("{}: converting {:?} to RGB", path.display(), dynamic.color());
            dynamic.into_rgb8()
        }
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: format!("{other:?} is not an 8-bit format"),
            })
        }
    };
    Ok(from_rgb8(&rgb))
}

pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    to_rgb8(img)?.save(path.as_ref())?;
    Ok(())
}

/// Quantizes to the 8-bit grid without touching the filesystem.
pub fn quantize(img: &ImageTensor) -> ImageTensor {
    img.map(|v| byte_to_unit(unit_to_byte(v)))
}
