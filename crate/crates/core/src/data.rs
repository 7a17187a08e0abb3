//! Corpus ingestion, normalisation, augmentation, splitting and batching.
//!
//! Corpus layout: `images/<name>.(png|jpg|jpeg)` with a matching
//! `masks/<name>.png`. Masks are 8-bit single-channel PNGs holding class
//! indices `0 = background`, `1 = crack`, `2 = delamination`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, Rgb32FImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const CRACK: u8 = 1;
pub const DELAMINATION: u8 = 2;
pub const CLASS_NAMES: [&str; 3] = ["background", "crack", "delamination"];

pub fn class_name(i: usize) -> String {
    CLASS_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class-{i}"))
}

/// Mixes a base seed with a path of indices into an independent stream seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != width * height {
            return Err(Error::invalid(format!(
                "{}×{} mask needs {} labels, got {}",
                width,
                height,
                width * height,
                classes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            classes,
        })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        Self {
            width,
            height,
            classes: vec![class; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.classes[row * self.width + col] = class;
    }

    /// `H × W × num_classes` one-hot encoding.
    pub fn one_hot(&self, num_classes: usize) -> Result<Tensor<f32>> {
        let mut data = vec![0.0f32; self.classes.len() * num_classes];
        for (i, &c) in self.classes.iter().enumerate() {
            if c as usize >= num_classes {
                return Err(Error::invalid(format!(
                    "label {c} at pixel {i} exceeds {num_classes} classes"
                )));
            }
            data[i * num_classes + c as usize] = 1.0;
        }
        Tensor::new(&[self.height, self.width, num_classes], data)
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.classes.clone())
            .expect("mask buffer matches its dimensions")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: LabelMask,
    pub source_id: String,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Ingestion(format!("{}: {e}", path.display()))
}

/// Resize so the shorter side equals `size`, then take the centred
/// `size × size` crop.
fn standardize<P>(img: &image::ImageBuffer<P, Vec<P::Subpixel>>, size: u32, filter: FilterType) -> image::ImageBuffer<P, Vec<P::Subpixel>>
where
    P: image::Pixel + 'static,
{
    let (w, h) = img.dimensions();
    let resized = if w.min(h) == size {
        img.clone()
    } else {
        let scale = size as f64 / w.min(h) as f64;
        let nw = ((w as f64 * scale).round() as u32).max(size);
        let nh = ((h as f64 * scale).round() as u32).max(size);
        imageops::resize(img, nw, nh, filter)
    };
    let (rw, rh) = resized.dimensions();
    if (rw, rh) == (size, size) {
        return resized;
    }
    imageops::crop_imm(&resized, (rw - size) / 2, (rh - size) / 2, size, size).to_image()
}

/// Decode an RGB image to `[0, 1]` floats at `size × size`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| io_err(path, e))?.to_rgb32f();
    let img: Rgb32FImage = standardize(&img, size as u32, FilterType::Triangle);
    Tensor::new(&[size, size, 3], img.into_raw())
}

/// Read an 8-bit class-index mask, validating every value against the
/// three-class palette. `size` standardizes the mask like the images.
pub fn load_mask(path: &Path, size: Option<usize>) -> Result<LabelMask> {
    let dynimg = image::open(path).map_err(|e| io_err(path, e))?;
    let gray = match dynimg {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Ingestion(format!(
                "{}: mask must be 8-bit single-channel, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    if let Some((x, y, p)) = gray.enumerate_pixels().find(|(_, _, p)| p.0[0] > DELAMINATION) {
        return Err(Error::Ingestion(format!(
            "{}: invalid mask value {} at pixel (row {y}, col {x})",
            path.display(),
            p.0[0]
        )));
    }
    let gray = match size {
        Some(s) => standardize(&gray, s as u32, FilterType::Nearest),
        None => gray,
    };
    let (w, h) = gray.dimensions();
    LabelMask::new(w as usize, h as usize, gray.into_raw())
}

/// Read an 8-bit single-channel foreground mask (any nonzero value is
/// foreground), as written by external segmenters.
pub fn load_binary_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let dynimg = image::open(path).map_err(|e| io_err(path, e))?;
    let gray = match dynimg {
        image::DynamicImage::ImageLuma8(g) => g,
        image::DynamicImage::ImageLumaA8(_) | image::DynamicImage::ImageRgb8(_) | image::DynamicImage::ImageRgba8(_) => {
            dynimg.to_luma8()
        }
        other => {
            return Err(Error::Ingestion(format!(
                "{}: unsupported mask format {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    Ok((w as usize, h as usize, gray.into_raw().into_iter().map(|v| v != 0).collect()))
}

pub fn save_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    mask.to_image().save(path).map_err(|e| io_err(path, e))
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Image files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        if p.is_file() && is_image(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Load every image/mask pair, standardized to `size × size`. Images are in
/// `[0, 1]` and not yet zero-centred; see [`ChannelMeans`].
pub fn load_corpus(image_dir: &Path, mask_dir: &Path, size: usize) -> Result<Vec<Sample>> {
    if !mask_dir.is_dir() {
        return Err(Error::Ingestion(format!(
            "mask directory {} does not exist",
            mask_dir.display()
        )));
    }
    let mut out = Vec::new();
    for img_path in list_images(image_dir)? {
        let stem = file_stem(&img_path);
        let mask_path = mask_dir.join(format!("{stem}.png"));
        if !mask_path.is_file() {
            return Err(Error::Ingestion(format!(
                "no mask {} for image {}",
                mask_path.display(),
                img_path.display()
            )));
        }
        let image = load_image(&img_path, size)?;
        let mask = load_mask(&mask_path, Some(size))?;
        out.push(Sample {
            image,
            mask,
            source_id: stem,
        });
    }
    Ok(out)
}

/// Per-channel means used for zero-centre normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeans(pub Vec<f64>);

impl ChannelMeans {
    pub fn compute(samples: &[Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Ingestion("cannot compute channel means of an empty set".into()))?;
        let c = first.image.channels();
        let mut sums = vec![0.0f64; c];
        let mut n = 0usize;
        for s in samples {
            for px in s.image.data().chunks_exact(c) {
                for (acc, &v) in sums.iter_mut().zip(px) {
                    *acc += v as f64;
                }
            }
            n += s.image.len() / c;
        }
        Ok(Self(sums.into_iter().map(|v| v / n as f64).collect()))
    }

    pub fn apply(&self, image: &mut Tensor<f32>) {
        let c = self.0.len();
        for px in image.data_mut().chunks_exact_mut(c) {
            for (v, &m) in px.iter_mut().zip(&self.0) {
                *v = (*v as f64 - m) as f32;
            }
        }
    }
}

/// Augmentation ranges. Angles are in degrees and drawn uniformly from
/// `[−range, range]`; reflections fire with probability ½ when enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub horizontal_reflection: bool,
    pub vertical_reflection: bool,
    /// Total copies per original, the original included.
    pub multiplier: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 30.0,
            shear_deg: 15.0,
            horizontal_reflection: true,
            vertical_reflection: true,
            multiplier: 2,
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            horizontal_reflection: false,
            vertical_reflection: false,
            multiplier: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_deg >= 0.0 && self.shear_deg >= 0.0) || self.shear_deg >= 90.0 {
            return Err(Error::Config(format!(
                "augmentation ranges must be nonnegative (shear below 90°), got rotation {} shear {}",
                self.rotation_deg, self.shear_deg
            )));
        }
        if self.multiplier < 1 {
            return Err(Error::Config("augmentation multiplier must be at least 1".into()));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineTransform {
        let mut uniform = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let rotation_deg = uniform(self.rotation_deg);
        let shear_deg = uniform(self.shear_deg);
        AffineTransform {
            rotation_deg,
            shear_deg,
            flip_horizontal: self.horizontal_reflection && rng.random_bool(0.5),
            flip_vertical: self.vertical_reflection && rng.random_bool(0.5),
        }
    }
}

/// Reflection, then horizontal shear, then rotation, about the image centre.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineTransform {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl AffineTransform {
    /// Forward 2×2 matrix acting on `(x, y)` offsets from the centre.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let fx = if self.flip_horizontal { -1.0 } else { 1.0 };
        let fy = if self.flip_vertical { -1.0 } else { 1.0 };
        // R · [[1, k], [0, 1]] · diag(fx, fy)
        [[c * fx, (c * k - s) * fy], [s * fx, (s * k + c) * fy]]
    }

    /// Output position of source pixel `(row, col)` in a `w × h` frame.
    pub fn map_point(&self, row: f64, col: f64, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let a = self.matrix();
        let (x, y) = (col - cx, row - cy);
        (a[1][0] * x + a[1][1] * y + cy, a[0][0] * x + a[0][1] * y + cx)
    }

    fn inverse(&self) -> [[f64; 2]; 2] {
        let a = self.matrix();
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]]
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.shear_deg == 0.0 && !self.flip_horizontal && !self.flip_vertical
    }

    /// Apply to image (bilinear, out-of-frame filled with the per-channel
    /// image mean) and mask (nearest neighbour, out-of-frame background).
    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        if self.is_identity() {
            return Ok(sample.clone());
        }
        let (h, w, c) = sample.image.hwc()?;
        if (sample.mask.width, sample.mask.height) != (w, h) {
            return Err(Error::invalid("image and mask dimensions differ"));
        }
        let inv = self.inverse();
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let mut fill = vec![0.0f64; c];
        for px in sample.image.data().chunks_exact(c) {
            for (f, &v) in fill.iter_mut().zip(px) {
                *f += v as f64;
            }
        }
        fill.iter_mut().for_each(|f| *f /= (w * h) as f64);

        let src = sample.image.data();
        let mut img = vec![0.0f32; h * w * c];
        let mut mask = LabelMask::filled(w, h, BACKGROUND);
        let tol = 1e-9;
        for r in 0..h {
            for q in 0..w {
                let (x, y) = (q as f64 - cx, r as f64 - cy);
                let sx = inv[0][0] * x + inv[0][1] * y + cx;
                let sy = inv[1][0] * x + inv[1][1] * y + cy;
                let out = &mut img[(r * w + q) * c..][..c];

                let (nx, ny) = (sx.round(), sy.round());
                if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                    mask.set(r, q, sample.mask.get(ny as usize, nx as usize));
                }

                if sx < -tol || sy < -tol || sx > (w - 1) as f64 + tol || sy > (h - 1) as f64 + tol {
                    for (o, &f) in out.iter_mut().zip(&fill) {
                        *o = f as f32;
                    }
                    continue;
                }
                let sx = sx.clamp(0.0, (w - 1) as f64);
                let sy = sy.clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                for k in 0..c {
                    let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + k] as f64;
                    let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                        + at(y0, x1) * fx * (1.0 - fy)
                        + at(y1, x0) * (1.0 - fx) * fy
                        + at(y1, x1) * fx * fy;
                    out[k] = v as f32;
                }
            }
        }
        Ok(Sample {
            image: Tensor::new(&[h, w, c], img)?,
            mask,
            source_id: sample.source_id.clone(),
        })
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &Sample, spec: &AugmentSpec, rng: &mut R) -> Result<Sample> {
    spec.draw(rng).apply(sample)
}

/// Each original followed by `multiplier − 1` augmented copies.
pub fn augment_corpus(samples: &[Sample], spec: &AugmentSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(samples.len() * spec.multiplier);
    for (i, s) in samples.iter().enumerate() {
        out.push(s.clone());
        for copy in 1..spec.multiplier {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64, copy as u64]));
            out.push(augment(s, spec, &mut rng)?);
        }
    }
    Ok(out)
}

/// Partition by `source_id`: a seeded shuffle of the distinct sources, the
/// first `round(fraction · n)` of which form the training set. Sample order
/// within each part follows the input.
pub fn split(samples: &[Sample], fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    if samples.is_empty() {
        return Err(Error::Ingestion("cannot split an empty corpus".into()));
    }
    let mut sources: Vec<&str> = samples.iter().map(|s| s.source_id.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5eed]));
    sources.shuffle(&mut rng);
    let n_train = ((fraction * sources.len() as f64).round() as usize).clamp(1, sources.len());
    let train_ids: std::collections::HashSet<&str> = sources[..n_train].iter().copied().collect();
    let (train, val): (Vec<&Sample>, Vec<&Sample>) = samples
        .iter()
        .partition(|s| train_ids.contains(s.source_id.as_str()));
    Ok((
        train.into_iter().cloned().collect(),
        val.into_iter().cloned().collect(),
    ))
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `N × H × W × C`.
    pub images: Tensor<f32>,
    /// `N × H × W × num_classes`, one-hot.
    pub labels: Tensor<f32>,
    /// Indices into the sample list.
    pub indices: Vec<usize>,
}

/// Sample order for one epoch: a shuffle seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba7c, epoch as u64]));
    idx.shuffle(&mut rng);
    idx
}

/// Shuffled minibatches for one epoch; the final short batch is kept.
pub fn minibatches(
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    num_classes: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    epoch_order(samples.len(), seed, epoch)
        .chunks(batch_size)
        .map(|chunk| {
            let images: Vec<_> = chunk.iter().map(|&i| samples[i].image.clone()).collect();
            let labels = chunk
                .iter()
                .map(|&i| samples[i].mask.one_hot(num_classes))
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch {
                images: Tensor::stack(&images)?,
                labels: Tensor::stack(&labels)?,
                indices: chunk.to_vec(),
            })
        })
        .collect()
}

/// Per-class pixel totals and, per class, the total pixel count of the
/// masks that contain it.
pub fn pixel_statistics<'a>(
    masks: impl IntoIterator<Item = &'a LabelMask>,
    num_classes: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut counts = vec![0.0; num_classes];
    let mut presence = vec![0.0; num_classes];
    for m in masks {
        let mut local = vec![0usize; num_classes];
        for &c in &m.classes {
            if (c as usize) < num_classes {
                local[c as usize] += 1;
            }
        }
        for k in 0..num_classes {
            if local[k] > 0 {
                counts[k] += local[k] as f64;
                presence[k] += m.classes.len() as f64;
            }
        }
    }
    (counts, presence)
}

/// Class histogram of a mask, keyed by class index.
pub fn class_histogram(mask: &LabelMask) -> BTreeMap<u8, usize> {
    let mut h = BTreeMap::new();
    for &c in &mask.classes {
        *h.entry(c).or_default() += 1;
    }
    h
}

pub fn write_png_gray(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::invalid("png buffer does not match dimensions"))?
        .save(path)
        .map_err(|e| io_err(path, e))
}
