//! Datasets: flat folders of PNGs and the procedural desk-scale set.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::load_image;
use crate::resample::bicubic_resize;

#[derive(Debug, Clone)]
pub enum ImageSource {
    Memory(Arc<ImageTensor>),
    File(PathBuf),
}

impl ImageSource {
    pub fn load(&self) -> Result<ImageTensor> {
        match self {
            ImageSource::Memory(img) => Ok(img.as_ref().clone()),
            ImageSource::File(path) => load_image(path),
        }
    }

    pub fn name(&self, index: usize) -> String {
        match self {
            ImageSource::Memory(_) => format!("item{index:05}"),
            ImageSource::File(path) => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("item{index:05}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    items: Vec<ImageSource>,
    /// Random crops of this size are drawn for training; `None` uses whole images.
    pub crop_size: Option<(usize, usize)>,
}

impl Dataset {
    pub fn from_sources(items: Vec<ImageSource>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        Ok(Self { items, crop_size: None })
    }

    pub fn from_images(images: Vec<ImageTensor>) -> Result<Self> {
        Self::from_sources(images.into_iter().map(|i| ImageSource::Memory(Arc::new(i))).collect())
    }

    /// Every `.png` directly inside `dir`, in file-name order.
    pub fn from_folder(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Dataset(format!("no PNG files in {}", dir.display())));
        }
        Self::from_sources(paths.into_iter().map(ImageSource::File).collect())
    }

    pub fn with_crop(mut self, crop: Option<(usize, usize)>) -> Self {
        self.crop_size = crop;
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<ImageTensor> {
        self.items
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("index {index} out of range")))?
            .load()
    }

    pub fn name(&self, index: usize) -> String {
        self.items[index].name(index)
    }

    /// Loads every item, failing on the first undecodable one.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.len() {
            self.get(i)?;
        }
        Ok(())
    }

    /// Deterministic train/validation split.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::invalid(format!("validation fraction {val_fraction} outside [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64 * val_fraction).round() as usize).min(self.len() - 1);
        let pick = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            Dataset {
                items: idx.iter().map(|&i| self.items[i].clone()).collect(),
                crop_size: self.crop_size,
            }
        };
        let (val, train) = order.split_at(n_val);
        Ok((pick(train), pick(val)))
    }

    /// Item `index`, randomly cropped when a crop size is set.
    pub fn sample_patch<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Result<ImageTensor> {
        let img = self.get(index)?;
        match self.crop_size {
            None => Ok(img),
            Some(crop) => random_crop(&img, crop, rng),
        }
    }
}

pub fn random_crop<R: Rng + ?Sized>(img: &ImageTensor, size: (usize, usize), rng: &mut R) -> Result<ImageTensor> {
    let (h, w) = img.resolution();
    if size.0 > h || size.1 > w {
        return Err(Error::Dataset(format!(
            "crop {}x{} larger than image {h}x{w}",
            size.0, size.1
        )));
    }
    let top = rng.random_range(0..=h - size.0);
    let left = rng.random_range(0..=w - size.1);
    img.crop(top, left, size.0, size.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Smooth random field with polygon overlays.
    FieldPolygons,
    /// A dominant oriented grating over a faint field.
    Grating,
    /// Field, grating and polygons together.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticItem {
    pub kind: SyntheticKind,
    /// Grating frequency in whole cycles per image `(vertical, horizontal)`.
    pub grating_cycles: Option<(i32, i32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub images: Vec<ImageTensor>,
    pub items: Vec<SyntheticItem>,
}

impl SyntheticDataset {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_images(self.images.clone())
    }

    /// Writes the generator parameters and per-item metadata as JSON.
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            generator: &'static str,
            spec: &'a SyntheticSpec,
            items: &'a [SyntheticItem],
        }
        let manifest = Manifest { generator: "synthetic-v1", spec: &self.spec, items: &self.items };
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Smooth Gaussian random field: coarse white noise, bicubically enlarged.
fn random_field<R: Rng + ?Sized>(h: usize, w: usize, coarse: usize, rng: &mut R) -> Result<ImageTensor> {
    let ch = (h / coarse).max(2);
    let cw = (w / coarse).max(2);
    let noise = ImageTensor::gaussian(1, ch, cw, rng);
    bicubic_resize(&noise, (h, w))
}

/// `sin(2π(fy·y/h + fx·x/w) + phase)` on an `h × w` grid.
pub fn grating(h: usize, w: usize, cycles: (i32, i32), phase: f64) -> ImageTensor {
    ImageTensor::from_fn(1, h, w, |(_, y, x)| {
        (2.0 * PI * (cycles.0 as f64 * y as f64 / h as f64 + cycles.1 as f64 * x as f64 / w as f64) + phase).sin()
    })
}

/// Coverage mask of a random convex polygon.
fn polygon_mask<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> ImageTensor {
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let radius = rng.random_range(0.15..0.4) * h.min(w) as f64;
    let sides = rng.random_range(3..=6);
    let mut angles: Vec<f64> = (0..sides).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    angles.sort_by(f64::total_cmp);
    let verts: Vec<(f64, f64)> = angles
        .iter()
        .map(|a| (cy + radius * a.sin(), cx + radius * a.cos()))
        .collect();
    ImageTensor::from_fn(1, h, w, |(_, y, x)| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut sign = 0.0f64;
        for i in 0..verts.len() {
            let (ay, ax) = verts[i];
            let (by, bx) = verts[(i + 1) % verts.len()];
            let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
            if cross != 0.0 {
                if sign == 0.0 {
                    sign = cross.signum();
                } else if cross.signum() != sign {
                    return 0.0;
                }
            }
        }
        1.0
    })
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
}

fn generate_item<R: Rng + ?Sized>(
    kind: SyntheticKind,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<(ImageTensor, SyntheticItem)> {
    let mut img = ImageTensor::zeros(3, h, w);
    let tint = random_color(rng);
    let field_amp = match kind {
        SyntheticKind::Grating => 0.1,
        _ => 0.35,
    };
    let field = random_field(h, w, 8, rng)?;
    for c in 0..3 {
        let base = 0.2 * tint[c];
        let mut chan = img.data_mut().index_axis_mut(ndarray::Axis(0), c);
        chan.assign(&field.data().index_axis(ndarray::Axis(0), 0).mapv(|v| base + field_amp * v));
    }

    let mut grating_cycles = None;
    if kind != SyntheticKind::FieldPolygons {
        let max_cycles = (h.min(w) / 6).max(3) as i32;
        let fy = rng.random_range(-max_cycles..=max_cycles);
        let fx = rng.random_range(2..=max_cycles);
        let amp = if kind == SyntheticKind::Grating { 0.6 } else { 0.3 };
        let phase = rng.random_range(0.0..2.0 * PI);
        let g = grating(h, w, (fy, fx), phase);
        let color = random_color(rng);
        for c in 0..3 {
            let weight = amp * (0.6 + 0.4 * color[c].abs());
            let gc = g.data().index_axis(ndarray::Axis(0), 0);
            let mut chan = img.data_mut().index_axis_mut(ndarray::Axis(0), c);
            chan.zip_mut_with(&gc, |o, &v| *o += weight * v);
        }
        grating_cycles = Some((fy, fx));
    }

    if kind != SyntheticKind::Grating {
        for _ in 0..rng.random_range(1..=3) {
            let mask = polygon_mask(h, w, rng);
            let color = random_color(rng);
            let opacity = rng.random_range(0.5..0.9);
            for c in 0..3 {
                let mc = mask.data().index_axis(ndarray::Axis(0), 0);
                let mut chan = img.data_mut().index_axis_mut(ndarray::Axis(0), c);
                chan.zip_mut_with(&mc, |o, &m| {
                    let a = opacity * m;
                    *o = (1.0 - a) * *o + a * color[c];
                });
            }
        }
    }
    Ok((img.clamp(-1.0, 1.0), SyntheticItem { kind, grating_cycles }))
}

/// Procedural images mixing smooth fields, gratings and hard-edged polygons.
/// Kinds cycle field/grating/mixed; everything is determined by the seed.
pub fn make_synthetic_dataset(count: usize, size: (usize, usize), seed: u64) -> Result<SyntheticDataset> {
    if count == 0 {
        return Err(Error::Dataset("synthetic dataset needs at least one image".into()));
    }
    if size.0 < 8 || size.1 < 8 {
        return Err(Error::Dataset(format!("synthetic images must be at least 8x8, got {size:?}")));
    }
    let kinds = [SyntheticKind::FieldPolygons, SyntheticKind::Grating, SyntheticKind::Mixed];
    let mut images = Vec::with_capacity(count);
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (img, item) = generate_item(kinds[i % kinds.len()], size.0, size.1, &mut rng)?;
        images.push(img);
        items.push(item);
    }
    Ok(SyntheticDataset {
        spec: SyntheticSpec { count, height: size.0, width: size.1, seed },
        images,
        items,
    })
}
