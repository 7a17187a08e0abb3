//! Procedural concrete-like images with drawn line cracks and delamination
//! patches, used as a small self-contained training corpus.

use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, LabelMask, Sample, CRACK, DELAMINATION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// One `size × size` RGB sample in `[0, 1]`. Every image holds all three
/// classes: a delamination ellipse and one to three dark cracks.
pub fn synthetic_sample(size: usize, seed: u64, id: impl Into<String>) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut mask = LabelMask::filled(size, size, 0);
    let mut img = vec![0.0f32; size * size * 3];

    let base = rng.random_range(0.5..0.62);
    let (gx, gy) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    for r in 0..size {
        for c in 0..size {
            let v = base + gx * (c as f64 / s - 0.5) + gy * (r as f64 / s - 0.5) + rng.random_range(-0.04..0.04);
            for k in 0..3 {
                img[(r * size + c) * 3 + k] = v as f32;
            }
        }
    }

    let (cy, cx) = (rng.random_range(0.25 * s..0.75 * s), rng.random_range(0.25 * s..0.75 * s));
    let (ry, rx) = (rng.random_range(0.1 * s..0.2 * s), rng.random_range(0.1 * s..0.2 * s));
    for r in 0..size {
        for c in 0..size {
            let d = ((r as f64 - cy) / ry).powi(2) + ((c as f64 - cx) / rx).powi(2);
            if d <= 1.0 {
                mask.set(r, c, DELAMINATION);
                let n = rng.random_range(-0.04..0.04);
                let px = &mut img[(r * size + c) * 3..][..3];
                px[0] = (0.80 + n) as f32;
                px[1] = (0.62 + n) as f32;
                px[2] = (0.42 + n) as f32;
            }
        }
    }

    let cracks = rng.random_range(1..=3);
    for _ in 0..cracks {
        let a = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let b = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let mid = (
            (a.0 + b.0) / 2.0 + rng.random_range(-0.1 * s..0.1 * s),
            (a.1 + b.1) / 2.0 + rng.random_range(-0.1 * s..0.1 * s),
        );
        let half_width = rng.random_range(0.6..1.3);
        for r in 0..size {
            for c in 0..size {
                let p = (r as f64, c as f64);
                if segment_distance(p, a, mid).min(segment_distance(p, mid, b)) <= half_width {
                    mask.set(r, c, CRACK);
                    let v = rng.random_range(0.08..0.16) as f32;
                    img[(r * size + c) * 3..][..3].fill(v);
                }
            }
        }
    }

    Sample {
        image: Tensor::new(&[size, size, 3], img).expect("buffer sized for image"),
        mask,
        source_id: id.into(),
    }
}

/// `count` samples named `synthetic-00`, `synthetic-01`, ….
pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Vec<Sample> {
    (0..count)
        .map(|i| synthetic_sample(size, derive_seed(seed, &[i as u64]), format!("synthetic-{i:02}")))
        .collect()
}

pub fn to_rgb8(image: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w, c) = image.hwc()?;
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let bytes = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized for image"))
}

/// Write `images/<id>.png` and `masks/<id>.png` under `dir`.
pub fn write_corpus(dir: &Path, samples: &[Sample]) -> Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in samples {
        let p = images.join(format!("{}.png", s.source_id));
        to_rgb8(&s.image)?
            .save(&p)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", p.display())))?;
        crate::data::save_mask(&masks.join(format!("{}.png", s.source_id)), &s.mask)?;
    }
    Ok(())
}
