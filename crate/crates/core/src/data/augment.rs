//! Training-time augmentation: horizontal flip, quarter turns,
//! brightness/contrast jitter, random crop and multi-scale resize. Labels never change; only geometry.

use image::imageops::{self, FilterType};
use image::Rgb32FImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MgtrError, Result};
use crate::geometry::{BoundingBox, CornerBox};
use crate::instances::{GroundTruthSet, MutualGazeInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    /// Chance of a random quarter turn (90°, 180° or 270°). Off by default:
    /// people are rarely upside down, but synthetic scenes are
    /// rotation-invariant.
    pub rotate_prob: f64,
    pub photometric_prob: f64,
    /// Brightness factor drawn from `[1 − b, 1 + b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 − c, 1 + c]`.
    pub contrast: f64,
    pub crop_prob: f64,
    /// Smallest crop side as a fraction of the image side.
    pub crop_min_fraction: f64,
    /// Instances whose heads keep less than this share of their area are dropped.
    pub min_head_fraction: f64,
    pub resize: bool,
    /// Multipliers of `base_short_side`.
    pub resize_scales: Vec<f64>,
    pub base_short_side: u32,
    pub max_resamples: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_prob: 0.5,
            rotate_prob: 0.0,
            photometric_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            crop_prob: 0.5,
            crop_min_fraction: 0.6,
            min_head_fraction: 0.25,
            resize: true,
            resize_scales: vec![0.6, 0.8, 1.0, 1.2],
            base_short_side: 512,
            max_resamples: 10,
        }
    }
}

impl AugmentationConfig {
    /// Everything off: `augment` returns its input.
    pub fn none() -> Self {
        AugmentationConfig {
            flip_prob: 0.0,
            rotate_prob: 0.0,
            photometric_prob: 0.0,
            crop_prob: 0.0,
            resize: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("rotate_prob", self.rotate_prob),
            ("photometric_prob", self.photometric_prob),
            ("crop_prob", self.crop_prob),
            ("min_head_fraction", self.min_head_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(MgtrError::Config(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(MgtrError::Config("brightness and contrast ranges must be in [0, 1)".into()));
        }
        if !(self.crop_min_fraction > 0.0 && self.crop_min_fraction <= 1.0) {
            return Err(MgtrError::Config(format!(
                "crop_min_fraction = {} is not in (0, 1]",
                self.crop_min_fraction
            )));
        }
        if self.resize_scales.is_empty() || self.resize_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(MgtrError::Config("resize_scales must be a non-empty set of positive numbers".into()));
        }
        if self.base_short_side == 0 {
            return Err(MgtrError::Config("base_short_side must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub image: Rgb32FImage,
    pub gt: GroundTruthSet,
    pub flipped: bool,
    /// Instances removed by the crop.
    pub dropped: usize,
    /// Extra draws needed because a crop removed every instance.
    pub resamples: usize,
    /// The input was returned unchanged after running out of resamples.
    pub fell_back: bool,
}

/// Pixel-space crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

pub fn flip_horizontal(img: &Rgb32FImage, gt: &GroundTruthSet) -> Result<(Rgb32FImage, GroundTruthSet)> {
    let instances = gt
        .instances
        .iter()
        .map(|i| MutualGazeInstance::new(i.head_a.flipped(), i.head_b.flipped(), i.laeo))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        imageops::flip_horizontal(img),
        GroundTruthSet::new(gt.image_id.clone(), gt.image_size, instances)?,
    ))
}

/// Rotates clockwise by `quarters` × 90°.
pub fn rotate_quarters(img: &Rgb32FImage, gt: &GroundTruthSet, quarters: u32) -> Result<(Rgb32FImage, GroundTruthSet)> {
    let (mut img, mut gt) = (img.clone(), gt.clone());
    for _ in 0..quarters % 4 {
        // (x, y) -> (1 − y, x) in normalized coordinates
        let turn = |b: &BoundingBox| BoundingBox::new(1.0 - b.cy, b.cx, b.h, b.w);
        let instances = gt
            .instances
            .iter()
            .map(|i| MutualGazeInstance::new(turn(&i.head_a)?, turn(&i.head_b)?, i.laeo))
            .collect::<Result<Vec<_>>>()?;
        let (w, h) = gt.image_size;
        gt = GroundTruthSet::new(gt.image_id.clone(), (h, w), instances)?;
        img = imageops::rotate90(&img);
    }
    Ok((img, gt))
}

/// `x' = clamp(((x − μ)·c + μ)·b)`, where μ is the mean intensity.
pub fn adjust_brightness_contrast(img: &Rgb32FImage, brightness: f32, contrast: f32) -> Rgb32FImage {
    let n = (img.width() * img.height()).max(1) as f32;
    let mean = img.pixels().map(|p| p.0.iter().sum::<f32>() / 3.0).sum::<f32>() / n;
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for v in p.0.iter_mut() {
            *v = (((*v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0);
        }
    }
    out
}

/// Crops the image and re-expresses the surviving boxes in the crop frame.
/// Returns the cropped pair and the number of dropped instances.
pub fn apply_crop(
    img: &Rgb32FImage,
    gt: &GroundTruthSet,
    win: CropWindow,
    min_head_fraction: f64,
) -> Result<(Rgb32FImage, GroundTruthSet, usize)> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if win.width == 0 || win.height == 0 || win.x + win.width > img.width() || win.y + win.height > img.height() {
        return Err(MgtrError::Config(format!("crop {win:?} does not fit a {w}x{h} image")));
    }
    let frame = CornerBox {
        x1: win.x as f64,
        y1: win.y as f64,
        x2: (win.x + win.width) as f64,
        y2: (win.y + win.height) as f64,
    };
    // None when too little of the head survives.
    let remap = |b: &BoundingBox| -> Option<BoundingBox> {
        let c = b.to_corner();
        let px = CornerBox {
            x1: c.x1 * w,
            y1: c.y1 * h,
            x2: c.x2 * w,
            y2: c.y2 * h,
        };
        let kept = CornerBox {
            x1: px.x1.max(frame.x1),
            y1: px.y1.max(frame.y1),
            x2: px.x2.min(frame.x2),
            y2: px.y2.min(frame.y2),
        };
        if kept.x2 <= kept.x1 || kept.y2 <= kept.y1 || kept.area() < min_head_fraction * px.area() {
            return None;
        }
        let local = CornerBox {
            x1: kept.x1 - frame.x1,
            y1: kept.y1 - frame.y1,
            x2: kept.x2 - frame.x1,
            y2: kept.y2 - frame.y1,
        };
        Some(local.normalized(win.width as f64, win.height as f64).to_center())
    };
    let mut instances = Vec::new();
    for inst in &gt.instances {
        if let (Some(a), Some(b)) = (remap(&inst.head_a), remap(&inst.head_b)) {
            instances.push(MutualGazeInstance::new(a, b, inst.laeo)?);
        }
    }
    let dropped = gt.len() - instances.len();
    let cropped = imageops::crop_imm(img, win.x, win.y, win.width, win.height).to_image();
    let gt = GroundTruthSet::new(gt.image_id.clone(), (win.width, win.height), instances)?;
    Ok((cropped, gt, dropped))
}

/// Resizes so the short side becomes `short_side`; boxes are unchanged.
pub fn resize_short_side(img: &Rgb32FImage, gt: &GroundTruthSet, short_side: u32) -> (Rgb32FImage, GroundTruthSet) {
    let (w, h) = img.dimensions();
    let s = short_side as f64 / w.min(h) as f64;
    let (nw, nh) = (((w as f64 * s).round() as u32).max(1), ((h as f64 * s).round() as u32).max(1));
    let out = imageops::resize(img, nw, nh, FilterType::Triangle);
    let mut gt = gt.clone();
    gt.image_size = (nw, nh);
    (out, gt)
}

fn sample_crop(rng: &mut impl Rng, w: u32, h: u32, min_fraction: f64) -> CropWindow {
    let cw = ((w as f64 * rng.random_range(min_fraction..=1.0)).round() as u32).clamp(1, w);
    let ch = ((h as f64 * rng.random_range(min_fraction..=1.0)).round() as u32).clamp(1, h);
    CropWindow {
        x: rng.random_range(0..=w - cw),
        y: rng.random_range(0..=h - ch),
        width: cw,
        height: ch,
    }
}

fn augment_once(
    img: &Rgb32FImage,
    gt: &GroundTruthSet,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<(Rgb32FImage, GroundTruthSet, bool, usize)> {
    let (mut img, mut gt) = (img.clone(), gt.clone());
    let mut flipped = false;
    if rng.random_bool(cfg.flip_prob) {
        (img, gt) = flip_horizontal(&img, &gt)?;
        flipped = true;
    }
    // no draw when off, so existing seeded streams are unchanged
    if cfg.rotate_prob > 0.0 && rng.random_bool(cfg.rotate_prob) {
        (img, gt) = rotate_quarters(&img, &gt, rng.random_range(1..=3))?;
    }
    if rng.random_bool(cfg.photometric_prob) {
        let b = rng.random_range(1.0 - cfg.brightness..=1.0 + cfg.brightness) as f32;
        let c = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) as f32;
        img = adjust_brightness_contrast(&img, b, c);
    }
    let mut dropped = 0;
    if rng.random_bool(cfg.crop_prob) {
        let win = sample_crop(rng, img.width(), img.height(), cfg.crop_min_fraction);
        (img, gt, dropped) = apply_crop(&img, &gt, win, cfg.min_head_fraction)?;
    }
    if cfg.resize {
        let scale = cfg.resize_scales[rng.random_range(0..cfg.resize_scales.len())];
        let side = ((cfg.base_short_side as f64 * scale).round() as u32).max(1);
        (img, gt) = resize_short_side(&img, &gt, side);
    }
    Ok((img, gt, flipped, dropped))
}

/// Applies the configured chain. A draw that leaves no instance of a
/// non-empty image is redrawn up to `max_resamples` times; after that the
/// input is returned unchanged.
pub fn augment(
    img: &Rgb32FImage,
    gt: &GroundTruthSet,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<AugmentOutcome> {
    cfg.validate()?;
    for attempt in 0..=cfg.max_resamples {
        match augment_once(img, gt, cfg, rng) {
            Ok((image, out, flipped, dropped)) if gt.is_empty() || !out.is_empty() => {
                if dropped > 0 {
                    log::debug!(
                        "{}: crop dropped {dropped}/{} instances",
                        gt.image_id,
                        gt.len()
                    );
                }
                return Ok(AugmentOutcome {
                    image,
                    gt: out,
                    flipped,
                    dropped,
                    resamples: attempt,
                    fell_back: false,
                });
            }
            // Clipping can in principle make two heads coincide; treat as a failed draw.
            Ok(_) | Err(MgtrError::InvalidInstance(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(AugmentOutcome {
        image: img.clone(),
        gt: gt.clone(),
        flipped: false,
        dropped: 0,
        resamples: cfg.max_resamples,
        fell_back: true,
    })
}
