//! Synthetic mutual-gaze scenes: flat disks as heads, each with a dark tick
//! marking where it looks. A pair looks at each other iff each head's gaze
//! ray passes within half a radius of the other head's center.

use image::{Rgb, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnnotationRecord;
use crate::error::{MgtrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    #[default]
    Gradient,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub width: u32,
    pub height: u32,
    /// Inclusive head-count range.
    pub min_heads: usize,
    pub max_heads: usize,
    /// Head radius range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Chance, per attempt, that a scene gets a pair turned toward each
    /// other; all other gaze directions are uniform.
    pub mutual_prob: f64,
    /// Attempts per scene; turned pairs are disjoint and the attempts stop
    /// at the first miss.
    pub max_turned_pairs: usize,
    /// Angular jitter (radians) applied to a turned pair.
    pub aim_jitter: f64,
    pub background: Background,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            width: 64,
            height: 64,
            min_heads: 2,
            max_heads: 4,
            min_radius: 5.0,
            max_radius: 8.0,
            mutual_prob: 0.6,
            max_turned_pairs: 1,
            aim_jitter: 0.08,
            background: Background::Gradient,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_heads < 2 || self.max_heads < self.min_heads {
            return Err(MgtrError::Config(format!(
                "head count range {}..={} needs at least two heads",
                self.min_heads, self.max_heads
            )));
        }
        if !(self.min_radius > 0.0 && self.max_radius >= self.min_radius) {
            return Err(MgtrError::Config("invalid radius range".into()));
        }
        if !(0.0..=1.0).contains(&self.mutual_prob) {
            return Err(MgtrError::Config("mutual_prob must be in [0, 1]".into()));
        }
        let side = self.width.min(self.height) as f64;
        if side < 4.0 * self.max_radius {
            return Err(MgtrError::Config(format!(
                "{}x{} is too small for radius {}",
                self.width, self.height, self.max_radius
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthHead {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    /// Gaze direction in radians, image axes (y down).
    pub angle: f64,
}

impl SynthHead {
    fn dir(&self) -> (f64, f64) {
        (self.angle.cos(), self.angle.sin())
    }

    /// Whether this head's gaze ray passes within `other.radius / 2` of the
    /// other head's center.
    pub fn sees(&self, other: &SynthHead) -> bool {
        let (ux, uy) = self.dir();
        let (vx, vy) = (other.x - self.x, other.y - self.y);
        let t = vx * ux + vy * uy;
        if t <= 0.0 {
            return false;
        }
        let (px, py) = (vx - t * ux, vy - t * uy);
        (px * px + py * py).sqrt() < other.radius / 2.0
    }
}

pub fn mutual(a: &SynthHead, b: &SynthHead) -> bool {
    a.sees(b) && b.sees(a)
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: Rgb32FImage,
    pub record: AnnotationRecord,
    pub heads: Vec<SynthHead>,
}

fn place_heads(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Vec<SynthHead> {
    let count = rng.random_range(spec.min_heads..=spec.max_heads);
    let (w, h) = (spec.width as f64, spec.height as f64);
    // retry the whole layout if a head cannot be placed
    loop {
        let mut heads: Vec<SynthHead> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..200 {
                let r = rng.random_range(spec.min_radius..=spec.max_radius);
                let x = rng.random_range(r + 1.0..=w - r - 1.0);
                let y = rng.random_range(r + 1.0..=h - r - 1.0);
                let clear = heads
                    .iter()
                    .all(|o| ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt() > o.radius + r + 3.0);
                if clear {
                    heads.push(SynthHead { x, y, radius: r, angle: 0.0 });
                    placed = true;
                    break;
                }
            }
            if !placed {
                break;
            }
        }
        if heads.len() == count {
            return heads;
        }
    }
}

fn render(spec: &SyntheticSceneSpec, heads: &[SynthHead], rng: &mut ChaCha8Rng) -> Rgb32FImage {
    let base: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(0.15..0.45));
    let tilt: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(-0.25..0.25));
    let (w, h) = (spec.width, spec.height);
    let mut img = Rgb32FImage::from_fn(w, h, |x, y| {
        let t = (x as f32 / w as f32 + y as f32 / h as f32) / 2.0;
        Rgb([0, 1, 2].map(|c| match spec.background {
            Background::Flat => base[c],
            Background::Gradient | Background::Noise => base[c] + tilt[c] * t,
        }))
    });
    if spec.background == Background::Noise {
        for p in img.pixels_mut() {
            let n: f32 = rng.random_range(-0.06..0.06);
            p.0 = p.0.map(|v| (v + n).clamp(0.0, 1.0));
        }
    }
    for head in heads {
        let skin = [
            rng.random_range(0.75..0.95f32),
            rng.random_range(0.55..0.75f32),
            rng.random_range(0.4..0.6f32),
        ];
        let (ux, uy) = head.dir();
        let x0 = (head.x - head.radius - 1.0).floor().max(0.0) as u32;
        let x1 = ((head.x + head.radius + 1.0).ceil() as u32).min(w - 1);
        let y0 = (head.y - head.radius - 1.0).floor().max(0.0) as u32;
        let y1 = ((head.y + head.radius + 1.0).ceil() as u32).min(h - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let (dx, dy) = (px as f64 + 0.5 - head.x, py as f64 + 0.5 - head.y);
                let d2 = dx * dx + dy * dy;
                if d2 > head.radius * head.radius {
                    continue;
                }
                // tick: the half of the gaze-direction diameter in front of the center
                let along = dx * ux + dy * uy;
                let across = (dx * uy - dy * ux).abs();
                let color = if along > 0.0 && across < 1.2 {
                    [0.08, 0.05, 0.05]
                } else {
                    skin
                };
                img.put_pixel(px, py, Rgb(color));
            }
        }
    }
    img
}

/// One scene; `index` selects an independent RNG stream of `spec.seed`.
pub fn generate_scene(spec: &SyntheticSceneSpec, index: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut heads = place_heads(spec, &mut rng);
    for head in heads.iter_mut() {
        head.angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    }
    let mut free: Vec<usize> = (0..heads.len()).collect();
    for _ in 0..spec.max_turned_pairs {
        if free.len() < 2 || !rng.random_bool(spec.mutual_prob) {
            break;
        }
        let a = rng.random_range(0..free.len());
        let b = (a + rng.random_range(1..free.len())) % free.len();
        let (i, j) = (free[a], free[b]);
        let toward = (heads[j].y - heads[i].y).atan2(heads[j].x - heads[i].x);
        heads[i].angle = toward + rng.random_range(-spec.aim_jitter..=spec.aim_jitter);
        heads[j].angle = toward + std::f64::consts::PI + rng.random_range(-spec.aim_jitter..=spec.aim_jitter);
        free.retain(|&k| k != i && k != j);
    }
    let image = super::quantize(&render(spec, &heads, &mut rng));
    let mut laeo_pairs = Vec::new();
    for i in 0..heads.len() {
        for j in i + 1..heads.len() {
            if mutual(&heads[i], &heads[j]) {
                laeo_pairs.push([i, j]);
            }
        }
    }
    let record = AnnotationRecord {
        image: format!("scene_{index:05}.png"),
        size: [spec.width, spec.height],
        heads: heads
            .iter()
            .map(|h| [h.x - h.radius, h.y - h.radius, h.x + h.radius, h.y + h.radius])
            .collect(),
        laeo_pairs,
    };
    Ok(SyntheticScene { image, record, heads })
}

/// Scenes `0..n_images` of the spec's seed, generated in parallel; the
/// output order and content depend only on the spec.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, n_images: usize) -> Result<Vec<SyntheticScene>> {
    spec.validate()?;
    (0..n_images as u64)
        .into_par_iter()
        .map(|i| generate_scene(spec, i))
        .collect()
}
