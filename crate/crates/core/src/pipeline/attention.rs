//! Attention heatmaps: the last encoder layer's self-attention and the last
//! decoder layer's cross-attention of the most confident queries, averaged
//! over heads, min-max scaled to `[0, 1]` and upsampled to the image size.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb, Rgb32FImage};
use serde::Serialize;

use crate::data;
use crate::error::{MgtrError, Result};
use crate::evaluation::{score_predictions, ScoreRule, ScoredDetection};
use crate::instances::{GazeClass, PERSON};
use crate::model::{ForwardCtx, Mgtr};

/// `[H, W]` row-major map.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl Heatmap {
    fn from_grid(values: Vec<f32>, w: usize, h: usize, out_w: u32, out_h: u32) -> Heatmap {
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        let scaled: Vec<f32> = values
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        let grid: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w as u32, h as u32, scaled).expect("grid size matches");
        let up = imageops::resize(&grid, out_w, out_h, FilterType::Triangle);
        Heatmap {
            width: out_w,
            height: out_h,
            values: up.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Heat blended over the image: blue (cold) to red (hot).
    pub fn overlay(&self, image: &Rgb32FImage) -> Rgb32FImage {
        Rgb32FImage::from_fn(self.width, self.height, |x, y| {
            let t = self.values[(y * self.width + x) as usize];
            let heat = [t, 1.0 - (2.0 * t - 1.0).abs(), 1.0 - t];
            let p = image.get_pixel(x, y).0;
            Rgb([0, 1, 2].map(|c| 0.45 * p[c] + 0.55 * heat[c]))
        })
    }
}

#[derive(Debug, Clone)]
pub struct AttentionMaps {
    /// Mean over heads and query positions of the last encoder layer: how
    /// much each location is attended to.
    pub encoder: Option<Heatmap>,
    /// Raw last-layer encoder attention averaged over heads, `[HW, HW]`.
    pub encoder_raw: Option<Vec<Vec<f32>>>,
    pub queries: Vec<(usize, f64, Heatmap)>,
    pub detections: Vec<ScoredDetection>,
    pub feature_size: (usize, usize),
}

fn head_mean(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    // [1, heads, L, S] → [L, S]
    Ok(t.to_dtype(DType::F32)?.mean(1)?.squeeze(0)?.to_vec2::<f32>()?)
}

/// Queries ranked by `p_h1[person] · p_h2[person] · max(p_laeo, p_not_laeo)`,
/// whether or not a not-match class wins.
fn rank_queries(logits: &crate::model::HeadOutputs) -> Result<Vec<(usize, f64)>> {
    let preds = logits.decode(&["q".to_string()])?;
    let mut ranked: Vec<(usize, f64)> = preds[0]
        .predictions
        .iter()
        .enumerate()
        .map(|(q, p)| (q, p.p_h1[PERSON] * p.p_h2[PERSON] * p.p_gaze[0].max(p.p_gaze[1])))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}

pub fn attention_maps(model: &Mgtr, image: &Rgb32FImage, top_k: usize, threshold: f64) -> Result<AttentionMaps> {
    let tensor = data::images_to_tensor(&[image], model.device())?;
    let out = model.forward(&tensor, &mut ForwardCtx::Eval)?;
    let (h, w) = out.feature_size;
    let (iw, ih) = image.dimensions();
    let (encoder, encoder_raw) = match out.encoder_attention.last() {
        Some(att) => {
            let raw = head_mean(att)?;
            let n = raw.len() as f32;
            let received: Vec<f32> = (0..h * w).map(|k| raw.iter().map(|row| row[k]).sum::<f32>() / n).collect();
            (Some(Heatmap::from_grid(received, w, h, iw, ih)), Some(raw))
        }
        None => (None, None),
    };
    let cross = out
        .decoder_cross_attention
        .last()
        .ok_or_else(|| MgtrError::Shape("model has no decoder layer".into()))?;
    let cross = head_mean(cross)?;
    let heads = out.final_heads();
    let queries = rank_queries(heads)?
        .into_iter()
        .take(top_k)
        .map(|(q, s)| (q, s, Heatmap::from_grid(cross[q].clone(), w, h, iw, ih)))
        .collect();
    let preds = heads.decode(&["image".to_string()])?;
    Ok(AttentionMaps {
        encoder,
        encoder_raw,
        queries,
        detections: score_predictions(&preds[0], threshold, ScoreRule::Product),
        feature_size: (h, w),
    })
}

fn draw_rect(img: &mut Rgb32FImage, x1: f64, y1: f64, x2: f64, y2: f64, color: [f32; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let clamp_x = |v: f64| (v.round() as i64).clamp(0, w - 1);
    let clamp_y = |v: f64| (v.round() as i64).clamp(0, h - 1);
    let (x1, x2, y1, y2) = (clamp_x(x1), clamp_x(x2), clamp_y(y1), clamp_y(y2));
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, Rgb(color));
        img.put_pixel(x as u32, y2 as u32, Rgb(color));
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, Rgb(color));
        img.put_pixel(x2 as u32, y as u32, Rgb(color));
    }
}

fn draw_line(img: &mut Rgb32FImage, a: (f64, f64), b: (f64, f64), color: [f32; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

/// Head boxes and a connecting line per detection: green for looking at
/// each other, red otherwise.
pub fn render_detections(image: &Rgb32FImage, dets: &[ScoredDetection]) -> Rgb32FImage {
    let mut out = image.clone();
    let (w, h) = (image.width() as f64, image.height() as f64);
    for d in dets {
        let color = match d.class {
            GazeClass::Laeo => [0.1, 0.9, 0.2],
            GazeClass::NotLaeo => [0.9, 0.15, 0.1],
        };
        for b in [d.box_a, d.box_b] {
            let c = b.to_corner();
            draw_rect(&mut out, c.x1 * w, c.y1 * h, c.x2 * w, c.y2 * h, color);
        }
        draw_line(&mut out, (d.box_a.cx * w, d.box_a.cy * h), (d.box_b.cx * w, d.box_b.cy * h), color);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionExport {
    pub encoder: Option<PathBuf>,
    pub queries: Vec<(usize, f64, PathBuf)>,
    pub overlay: PathBuf,
}

pub fn export_attention(
    model: &Mgtr,
    image: &Rgb32FImage,
    out_dir: &Path,
    top_k: usize,
    threshold: f64,
) -> Result<AttentionExport> {
    std::fs::create_dir_all(out_dir)?;
    let maps = attention_maps(model, image, top_k, threshold)?;
    let encoder = match &maps.encoder {
        Some(m) => {
            let p = out_dir.join("encoder_attention.png");
            data::save_png(&p, &m.overlay(image))?;
            Some(p)
        }
        None => None,
    };
    let mut queries = Vec::new();
    for (q, score, m) in &maps.queries {
        let p = out_dir.join(format!("decoder_query_{q:03}.png"));
        data::save_png(&p, &m.overlay(image))?;
        queries.push((*q, *score, p));
    }
    let overlay = out_dir.join("detections.png");
    data::save_png(&overlay, &render_detections(image, &maps.detections))?;
    Ok(AttentionExport {
        encoder,
        queries,
        overlay,
    })
}

/// Softmax rows of the raw maps sum to one; exposed for checks.
pub fn row_sums(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.sum(D::Minus1)?.flatten_all()?.to_vec1::<f32>()?)
}
