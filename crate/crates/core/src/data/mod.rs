//! Annotation schema, image I/O and normalization, augmentation, and the
//! synthetic scene generator.
//!
//! Annotation files are JSON: either an array of records or one record per
//! line. A record looks like
//!
//! ```json
//! {"image": "frames/0001.png", "size": [640, 480],
//!  "heads": [[10, 20, 60, 80], [300, 40, 350, 95]],
//!  "laeo_pairs": [[0, 1]]}
//! ```
//!
//! Coordinates are pixels, corner form, origin top-left. Only positive pairs
//! are listed; every other head pair is a negative.

pub mod augment;
pub mod synthetic;

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::Rgb32FImage;
use serde::{Deserialize, Serialize};

use crate::error::{MgtrError, Result};
use crate::geometry::CornerBox;
use crate::instances::{derive_negatives, GroundTruthSet};

pub use augment::{augment, AugmentOutcome, AugmentationConfig};
pub use synthetic::{generate_synthetic, SyntheticScene, SyntheticSceneSpec};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    /// (width, height) in pixels.
    pub size: [u32; 2],
    pub heads: Vec<[f64; 4]>,
    #[serde(default)]
    pub laeo_pairs: Vec<[usize; 2]>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let [w, h] = self.size;
        if w == 0 || h == 0 {
            return Err(format!("image size {w}x{h} is empty"));
        }
        for (k, b) in self.heads.iter().enumerate() {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(format!("head {k}: non-finite coordinate"));
            }
            let c = self.clipped_head(k);
            if c.x2 <= c.x1 || c.y2 <= c.y1 {
                return Err(format!("head {k}: {b:?} has no area inside the image"));
            }
        }
        let n = self.heads.len();
        let mut seen = std::collections::HashSet::new();
        for &[i, j] in &self.laeo_pairs {
            if i >= n || j >= n {
                return Err(format!("pair [{i}, {j}] out of range for {n} heads"));
            }
            if i == j {
                return Err(format!("pair [{i}, {j}] pairs a head with itself"));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(format!("pair [{i}, {j}] listed twice"));
            }
        }
        Ok(())
    }

    /// Head `k` clipped to the image, in pixels.
    fn clipped_head(&self, k: usize) -> CornerBox {
        let [x1, y1, x2, y2] = self.heads[k];
        CornerBox { x1, y1, x2, y2 }.clipped(self.size[0] as f64, self.size[1] as f64)
    }

    /// Normalized center boxes plus all head pairs, positives as annotated.
    pub fn to_ground_truth(&self) -> Result<GroundTruthSet> {
        self.validate()
            .map_err(|e| MgtrError::Annotation(vec![format!("{}: {e}", self.image)]))?;
        let (w, h) = (self.size[0] as f64, self.size[1] as f64);
        let heads: Vec<_> = (0..self.heads.len())
            .map(|k| self.clipped_head(k).normalized(w, h).to_center())
            .collect();
        let pairs: Vec<(usize, usize)> = self.laeo_pairs.iter().map(|&[i, j]| (i, j)).collect();
        derive_negatives(self.image.clone(), (self.size[0], self.size[1]), &heads, &pairs)
    }
}

/// Parses and validates every record. All problems are reported together,
/// each tagged with the record position and image name.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    let mut errors = Vec::new();
    let mut records = Vec::new();
    let raw: Vec<(String, serde_json::Value)> = if trimmed.starts_with('[') {
        let values: Vec<serde_json::Value> = serde_json::from_str(text)?;
        values.into_iter().enumerate().map(|(i, v)| (format!("record {i}"), v)).collect()
    } else {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str(line) {
                Ok(v) => out.push((format!("line {}", i + 1), v)),
                Err(e) => errors.push(format!("line {}: {e}", i + 1)),
            }
        }
        out
    };
    for (pos, value) in raw {
        let name = value.get("image").and_then(|v| v.as_str()).unwrap_or("?").to_string();
        match serde_json::from_value::<AnnotationRecord>(value) {
            Ok(rec) => match rec.validate() {
                Ok(()) => records.push(rec),
                Err(e) => errors.push(format!("{pos} ({name}): {e}")),
            },
            Err(e) => errors.push(format!("{pos} ({name}): {e}")),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(MgtrError::Annotation(errors))
    }
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(&std::fs::read_to_string(path)?)
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(records)?)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Rgb32FImage> {
    Ok(image::open(path)?.to_rgb32f())
}

/// Writes an `[0, 1]` float image as 8-bit PNG.
pub fn save_png(path: &Path, img: &Rgb32FImage) -> Result<()> {
    to_rgb8(img).save(path)?;
    Ok(())
}

pub fn to_rgb8(img: &Rgb32FImage) -> image::RgbImage {
    image::RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0;
        image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Round-trips through 8 bits, so in-memory images match what a PNG reload
/// would give.
pub fn quantize(img: &Rgb32FImage) -> Rgb32FImage {
    image::DynamicImage::ImageRgb8(to_rgb8(img)).to_rgb32f()
}

/// Per-channel `(x − mean) / std`, returned planar (`[3, H, W]` row-major).
pub fn normalize_image(img: &Rgb32FImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        let at = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * w * h + at] = (p.0[c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    out
}

pub fn denormalize_image(planar: &[f32], width: u32, height: u32) -> Result<Rgb32FImage> {
    let n = (width * height) as usize;
    if planar.len() != 3 * n {
        return Err(MgtrError::Shape(format!(
            "{} values for a 3x{height}x{width} image",
            planar.len()
        )));
    }
    Ok(Rgb32FImage::from_fn(width, height, |x, y| {
        let at = (y * width + x) as usize;
        image::Rgb([0, 1, 2].map(|c| planar[c * n + at] * IMAGENET_STD[c] + IMAGENET_MEAN[c]))
    }))
}

/// Normalized `[B, 3, H, W]` batch. All images must share one size.
pub fn images_to_tensor(images: &[&Rgb32FImage], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| MgtrError::Shape("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(MgtrError::Shape(format!(
                "batch mixes {}x{} and {w}x{h} images",
                img.width(),
                img.height()
            )));
        }
        data.extend(normalize_image(img));
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?)
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Rgb32FImage,
    pub gt: GroundTruthSet,
}

/// Loads every record's image (paths relative to the annotation file) and
/// converts its annotation.
pub fn load_dataset(annotations: &Path) -> Result<Vec<Sample>> {
    let records = load_annotations(annotations)?;
    let root = annotations.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut errors = Vec::new();
    let mut samples = Vec::with_capacity(records.len());
    for rec in &records {
        let path: PathBuf = root.join(&rec.image);
        let loaded = load_image(&path).and_then(|image| {
            if image.dimensions() != (rec.size[0], rec.size[1]) {
                return Err(MgtrError::Annotation(vec![format!(
                    "image is {}x{}, annotation says {}x{}",
                    image.width(),
                    image.height(),
                    rec.size[0],
                    rec.size[1]
                )]));
            }
            Ok(Sample {
                image,
                gt: rec.to_ground_truth()?,
            })
        });
        match loaded {
            Ok(s) => samples.push(s),
            Err(e) => errors.push(format!("{}: {e}", rec.image)),
        }
    }
    if errors.is_empty() {
        Ok(samples)
    } else {
        Err(MgtrError::Annotation(errors))
    }
}
