//! Training, evaluation, inference and artifact export.
//!
//! Every random draw in a run comes from a ChaCha stream derived from the run
//! seed and a position (epoch, batch, step), never from shared mutable RNG
//! state. That makes two runs with the same seed bit-identical and lets a
//! resumed run continue exactly where the checkpoint left off.

pub mod attention;
pub mod checkpoint;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use image::Rgb32FImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, augment, AugmentationConfig, Sample, SyntheticSceneSpec};
use crate::error::{MgtrError, Result};
use crate::evaluation::{evaluate, score_predictions, EvalConfig, EvalReport, ScoredDetection};
use crate::geometry::BoundingBox;
use crate::instances::{GroundTruthSet, MutualGazeInstance, PredictionSet};
use crate::losses::{loss_gradients, Batch, LossBreakdown, LossWeights};
use crate::matcher::MatchWeights;
use crate::model::{ForwardCtx, Mgtr, ModelConfig, ParamGroup};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use optim::{AdamW, OptimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub matcher: MatchWeights,
    pub loss: LossWeights,
    pub augment: AugmentationConfig,
    pub eval: EvalConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: u64,
    /// Hard step budget across the whole run (including resumed parts).
    pub max_steps: Option<u64>,
    /// Evaluations without improvement before stopping.
    pub patience: u64,
    /// Stop as soon as the monitored mAP reaches this value.
    pub target_map: Option<f64>,
    pub train_annotations: Option<PathBuf>,
    /// Split monitored for early stopping; the training split when absent.
    pub val_annotations: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Pretrained single-class detector weights (safetensors) to start from.
    pub init_from: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            matcher: MatchWeights::default(),
            loss: LossWeights::default(),
            augment: AugmentationConfig::default(),
            eval: EvalConfig::default(),
            optim: OptimConfig::default(),
            batch_size: 8,
            epochs: 100,
            max_steps: None,
            patience: 10,
            target_map: None,
            train_annotations: None,
            val_annotations: None,
            output_dir: PathBuf::from("runs/mgtr"),
            init_from: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Desk-scale setup: the toy model on 64×64 synthetic scenes, no resize
    /// or crop but quarter turns (the scenes are rotation-invariant),
    /// constant learning rate 5e-4 with gradient clipping at 0.1.
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            augment: AugmentationConfig {
                flip_prob: 0.5,
                rotate_prob: 0.75,
                photometric_prob: 0.5,
                crop_prob: 0.0,
                resize: false,
                ..Default::default()
            },
            optim: OptimConfig {
                lr: 5e-4,
                lr_backbone: 5e-4,
                clip_norm: 0.1,
                ..Default::default()
            },
            batch_size: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.matcher.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(MgtrError::Config("batch_size must be >= 1".into()));
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(MgtrError::Config("eval.iou_threshold must be in (0, 1]".into()));
        }
        Ok(())
    }
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Independent random stream for (`domain`, `index`) under `seed`.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Loss components without the per-query detail, as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub class_h1: f64,
    pub class_h2: f64,
    pub class_gaze: f64,
    pub box_l1: f64,
    pub box_giou: f64,
}

impl From<&LossBreakdown> for LossSummary {
    fn from(l: &LossBreakdown) -> Self {
        LossSummary {
            total: l.total,
            class_h1: l.class_h1,
            class_h2: l.class_h2,
            class_gaze: l.class_gaze,
            box_l1: l.box_l1,
            box_giou: l.box_giou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: String,
    pub map: f64,
    pub ap_rare: f64,
    pub ap_normal: f64,
    pub recall: f64,
}

impl EvalSummary {
    fn new(split: &str, r: &EvalReport) -> Self {
        EvalSummary {
            split: split.to_string(),
            map: r.map,
            ap_rare: r.ap_rare,
            ap_normal: r.ap_normal,
            recall: r.recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogEntry {
    pub step: u64,
    pub epoch: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    pub lr: f64,
    pub lr_backbone: f64,
    pub wall_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSummary>,
}

/// Pads every image to the largest size in the batch (bottom/right) and
/// re-expresses the boxes in the padded frame.
pub fn collate(images: &[Rgb32FImage], targets: &[GroundTruthSet], device: &Device) -> Result<Batch> {
    let w = images.iter().map(|i| i.width()).max().unwrap_or(0);
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let mut padded = Vec::with_capacity(images.len());
    let mut out_targets = Vec::with_capacity(targets.len());
    for (img, gt) in images.iter().zip(targets) {
        if img.dimensions() == (w, h) {
            padded.push(img.clone());
            out_targets.push(gt.clone());
            continue;
        }
        // fill with the normalization mean so padding reads as zeros
        let mut canvas = Rgb32FImage::from_pixel(w, h, image::Rgb(data::IMAGENET_MEAN));
        image::imageops::replace(&mut canvas, img, 0, 0);
        let (sx, sy) = (img.width() as f64 / w as f64, img.height() as f64 / h as f64);
        let scale = |b: &BoundingBox| BoundingBox {
            cx: b.cx * sx,
            cy: b.cy * sy,
            w: b.w * sx,
            h: b.h * sy,
        };
        let instances = gt
            .instances
            .iter()
            .map(|i| MutualGazeInstance::new(scale(&i.head_a), scale(&i.head_b), i.laeo))
            .collect::<Result<Vec<_>>>()?;
        padded.push(canvas);
        out_targets.push(GroundTruthSet::new(gt.image_id.clone(), (w, h), instances)?);
    }
    let refs: Vec<&Rgb32FImage> = padded.iter().collect();
    Ok(Batch {
        images: data::images_to_tensor(&refs, device)?,
        targets: out_targets,
    })
}

pub struct Trainer {
    cfg: RunConfig,
    model: Mgtr,
    opt: AdamW,
    state: TrainState,
}

impl Trainer {
    pub fn new(cfg: RunConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let model = Mgtr::new(&cfg.model, cfg.seed, device)?;
        if let Some(path) = &cfg.init_from {
            let report = crate::model::import::import_safetensors(&model, path)?;
            log::info!(
                "initialized {} tensors from {} ({} skipped)",
                report.loaded.len(),
                path.display(),
                report.skipped.len()
            );
        }
        Ok(Trainer {
            opt: AdamW::new(cfg.optim),
            cfg,
            model,
            state: TrainState::default(),
        })
    }

    /// Restores model, optimizer and counters. `overrides` replaces the
    /// stored config where the model architecture is unaffected.
    pub fn resume(path: &Path, device: &Device, overrides: Option<RunConfig>) -> Result<Self> {
        let ck = load_checkpoint(path, device)?;
        let cfg = match overrides {
            Some(c) if c.model != ck.config.model => {
                return Err(MgtrError::Checkpoint {
                    path: path.to_path_buf(),
                    msg: "model config differs from the checkpoint".into(),
                })
            }
            Some(c) => c,
            None => ck.config.clone(),
        };
        let model = Mgtr::new(&cfg.model, cfg.seed, device)?;
        load_params(&model, &ck.params, path)?;
        Ok(Trainer {
            opt: AdamW::restore(cfg.optim, ck.state.step, &ck.optimizer),
            cfg,
            model,
            state: ck.state,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Mgtr {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &self.cfg,
            &self.state,
            &self.model.params().snapshot()?,
            &self.opt.state_tensors(),
        )
    }

    /// One optimizer step on a collated batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<(LossBreakdown, f64)> {
        let rng = stream_rng(self.cfg.seed, STREAM_DROPOUT, self.state.step);
        let mut ctx = ForwardCtx::train(rng, self.cfg.model.dropout);
        let rec = loss_gradients(&self.model, batch, &self.cfg.matcher, &self.cfg.loss, &mut ctx).map_err(|e| {
            match e {
                MgtrError::NonFiniteLoss { .. } => MgtrError::NonFiniteLoss {
                    batch: self.state.step as usize,
                },
                other => other,
            }
        })?;
        let norm = self.opt.step(self.model.params(), &rec.grads)?;
        self.state.step += 1;
        Ok((rec.loss, norm))
    }

    /// Augmented, collated batches of epoch `epoch`, in training order.
    fn epoch_batches(&self, samples: &[Sample], epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, STREAM_SHUFFLE, epoch));
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn make_batch(&self, samples: &[Sample], idx: &[usize], epoch: u64, batch_no: u64) -> Result<Batch> {
        let cfg = &self.cfg.augment;
        let seed = self.cfg.seed;
        let augmented = idx
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut rng = stream_rng(seed, STREAM_AUGMENT, (epoch << 32) | (batch_no << 12) | k as u64);
                augment(&samples[i].image, &samples[i].gt, cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<Rgb32FImage> = augmented.iter().map(|a| a.image.clone()).collect();
        let targets: Vec<GroundTruthSet> = augmented.into_iter().map(|a| a.gt).collect();
        collate(&images, &targets, self.model.device())
    }

    /// Runs until the end of the current epoch or the step budget. Returns
    /// whether the epoch completed.
    pub fn run_epoch(&mut self, samples: &[Sample], on_step: &mut dyn FnMut(&TrainingLogEntry)) -> Result<bool> {
        if samples.is_empty() {
            return Err(MgtrError::Config("empty training set".into()));
        }
        let started = Instant::now();
        let epoch = self.state.epoch;
        let batches = self.epoch_batches(samples, epoch);
        for (b, idx) in batches.iter().enumerate().skip(self.state.batch_in_epoch as usize) {
            if self.cfg.max_steps.is_some_and(|m| self.state.step >= m) {
                return Ok(false);
            }
            let batch = self.make_batch(samples, idx, epoch, b as u64)?;
            let (loss, norm) = self.train_step(&batch)?;
            self.state.batch_in_epoch = b as u64 + 1;
            on_step(&TrainingLogEntry {
                step: self.state.step,
                epoch,
                loss: Some(LossSummary::from(&loss)),
                grad_norm: Some(norm),
                lr: self.cfg.optim.lr_for(ParamGroup::Transformer, self.state.step - 1),
                lr_backbone: self.cfg.optim.lr_for(ParamGroup::Backbone, self.state.step - 1),
                wall_secs: started.elapsed().as_secs_f64(),
                eval: None,
            });
        }
        self.state.epoch += 1;
        self.state.batch_in_epoch = 0;
        Ok(true)
    }
}

pub fn load_params(model: &Mgtr, params: &std::collections::BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    for (name, _) in model.params().iter() {
        let t = params.get(name).ok_or_else(|| MgtrError::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("missing parameter {name}"),
        })?;
        model.params().set(name, t)?;
    }
    Ok(())
}

/// Rebuilds the model stored in a checkpoint.
pub fn load_model(path: &Path, device: &Device) -> Result<(Mgtr, RunConfig)> {
    let ck = load_checkpoint(path, device)?;
    let model = Mgtr::new(&ck.config.model, ck.config.seed, device)?;
    load_params(&model, &ck.params, path)?;
    Ok((model, ck.config))
}

/// Eval-mode predictions, batching consecutive images of equal size.
pub fn predict_samples(model: &Mgtr, samples: &[Sample], batch_size: usize) -> Result<Vec<PredictionSet>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut start = 0;
    while start < samples.len() {
        let dims = samples[start].image.dimensions();
        let mut end = start + 1;
        while end < samples.len() && end - start < batch_size.max(1) && samples[end].image.dimensions() == dims {
            end += 1;
        }
        let imgs: Vec<&Rgb32FImage> = samples[start..end].iter().map(|s| &s.image).collect();
        let ids: Vec<String> = samples[start..end].iter().map(|s| s.gt.image_id.clone()).collect();
        let tensor = data::images_to_tensor(&imgs, model.device())?;
        out.extend(model.predict(&tensor, &ids)?);
        start = end;
    }
    Ok(out)
}

pub fn evaluate_model(model: &Mgtr, samples: &[Sample], cfg: &EvalConfig, batch_size: usize) -> Result<EvalReport> {
    let started = Instant::now();
    let preds = predict_samples(model, samples, batch_size)?;
    let elapsed = started.elapsed().as_secs_f64();
    let pairs: Vec<(PredictionSet, GroundTruthSet)> =
        preds.into_iter().zip(samples.iter().map(|s| s.gt.clone())).collect();
    let mut report = evaluate(&pairs, cfg)?;
    report.images_per_sec = Some(samples.len() as f64 / elapsed.max(1e-9));
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub steps: u64,
    pub epochs: u64,
    pub best_map: Option<f64>,
    pub stop_reason: String,
}

/// Full training run: epochs of updates, an evaluation after each epoch on
/// the monitored split, best/last checkpoints and a JSON-lines log in
/// `cfg.output_dir`.
pub fn train(
    trainer: &mut Trainer,
    train_set: &[Sample],
    val_set: Option<&[Sample]>,
    progress: &mut dyn FnMut(&TrainingLogEntry),
) -> Result<TrainOutcome> {
    let cfg = trainer.config().clone();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let best = cfg.output_dir.join("best.safetensors");
    let last = cfg.output_dir.join("last.safetensors");
    let (monitor, split) = match val_set {
        Some(v) => (v, "val"),
        None => (train_set, "train"),
    };
    let started = Instant::now();
    let write = |entry: &TrainingLogEntry, log: &mut std::fs::File| -> Result<()> {
        writeln!(log, "{}", serde_json::to_string(entry)?)?;
        Ok(())
    };
    let mut stop_reason = "epoch limit".to_string();
    while trainer.state().epoch < cfg.epochs {
        let mut io_err = None;
        let completed = trainer.run_epoch(train_set, &mut |e| {
            if let Err(err) = write(e, &mut log) {
                io_err.get_or_insert(err);
            }
            progress(e);
        })?;
        if let Some(e) = io_err {
            return Err(e);
        }
        let report = evaluate_model(trainer.model(), monitor, &cfg.eval, cfg.batch_size)?;
        let entry = TrainingLogEntry {
            step: trainer.state().step,
            epoch: trainer.state().epoch,
            loss: None,
            grad_norm: None,
            lr: cfg.optim.lr_for(ParamGroup::Transformer, trainer.state().step),
            lr_backbone: cfg.optim.lr_for(ParamGroup::Backbone, trainer.state().step),
            wall_secs: started.elapsed().as_secs_f64(),
            eval: Some(EvalSummary::new(split, &report)),
        };
        write(&entry, &mut log)?;
        progress(&entry);
        let improved = trainer.state.best_map.is_none_or(|b| report.map > b);
        if improved {
            trainer.state.best_map = Some(report.map);
            trainer.state.best_step = Some(trainer.state.step);
            trainer.state.evals_since_best = 0;
            trainer.save(&best)?;
        } else {
            trainer.state.evals_since_best += 1;
        }
        trainer.save(&last)?;
        if !completed {
            stop_reason = "step budget".into();
            break;
        }
        if cfg.target_map.is_some_and(|t| report.map >= t) {
            stop_reason = "target mAP reached".into();
            break;
        }
        if trainer.state.evals_since_best >= cfg.patience {
            stop_reason = format!("no improvement in {} evaluations", cfg.patience);
            break;
        }
        if cfg.max_steps.is_some_and(|m| trainer.state().step >= m) {
            stop_reason = "step budget".into();
            break;
        }
    }
    Ok(TrainOutcome {
        best_checkpoint: best,
        last_checkpoint: last,
        log_path,
        steps: trainer.state().step,
        epochs: trainer.state().epoch,
        best_map: trainer.state().best_map,
        stop_reason,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<ScoredDetection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferReport {
    pub images: Vec<ImageDetections>,
    pub elapsed_secs: f64,
    pub images_per_sec: f64,
}

/// One forward pass per image; results keep the input order.
pub fn infer(model: &Mgtr, images: &[(String, Rgb32FImage)], cfg: &EvalConfig) -> Result<InferReport> {
    let started = Instant::now();
    let mut out = Vec::with_capacity(images.len());
    for (id, img) in images {
        let tensor = data::images_to_tensor(&[img], model.device())?;
        let preds = model.predict(&tensor, std::slice::from_ref(id))?;
        out.push(ImageDetections {
            image_id: id.clone(),
            width: img.width(),
            height: img.height(),
            detections: score_predictions(&preds[0], cfg.score_threshold, cfg.score_rule),
        });
    }
    let elapsed = started.elapsed().as_secs_f64();
    Ok(InferReport {
        images: out,
        elapsed_secs: elapsed,
        images_per_sec: images.len() as f64 / elapsed.max(1e-9),
    })
}

/// Renders `n_images` scenes into `out_dir` (PNGs plus `annotations.json`).
/// Returns the annotation path.
pub fn synth_data(spec: &SyntheticSceneSpec, n_images: usize, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let scenes = data::generate_synthetic(spec, n_images)?;
    scenes
        .par_iter()
        .map(|s| data::save_png(&out_dir.join(&s.record.image), &s.image))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<_> = scenes.into_iter().map(|s| s.record).collect();
    let path = out_dir.join("annotations.json");
    data::save_annotations(&path, &records)?;
    Ok(path)
}

/// In-memory synthetic samples (identical to what `synth_data` writes and
/// `load_dataset` reads back).
pub fn synthetic_samples(spec: &SyntheticSceneSpec, n_images: usize) -> Result<Vec<Sample>> {
    data::generate_synthetic(spec, n_images)?
        .into_iter()
        .map(|s| {
            Ok(Sample {
                gt: s.record.to_ground_truth()?,
                image: s.image,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::toy();
        cfg.model.d_model = 32;
        cfg.model.ffn_dim = 64;
        cfg.model.num_queries = 8;
        cfg.model.enc_layers = 1;
        cfg.model.dec_layers = 1;
        cfg.model.backbone = crate::model::BackboneConfig::Tiny { channels: vec![8, 16, 16] };
        cfg.batch_size = 2;
        cfg.seed = 5;
        cfg
    }

    fn samples(n: usize) -> Vec<Sample> {
        let spec = SyntheticSceneSpec {
            width: 32,
            height: 32,
            min_radius: 3.0,
            max_radius: 5.0,
            seed: 8,
            ..Default::default()
        };
        synthetic_samples(&spec, n).unwrap()
    }

    fn params_of(t: &Trainer) -> Vec<Vec<f32>> {
        t.model()
            .params()
            .iter()
            .map(|(_, p)| p.var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap())
            .collect()
    }

    #[test]
    fn zero_lr_epoch_leaves_parameters_bit_identical() {
        let mut cfg = tiny_cfg();
        cfg.optim.lr = 0.0;
        cfg.optim.lr_backbone = 0.0;
        let mut t = Trainer::new(cfg, &Device::Cpu).unwrap();
        let before = params_of(&t);
        t.run_epoch(&samples(4), &mut |_| {}).unwrap();
        assert_eq!(t.state().step, 2);
        assert_eq!(before, params_of(&t));
    }

    #[test]
    fn assignment_is_stable_under_a_zero_lr_step() {
        let mut cfg = tiny_cfg();
        cfg.optim.lr = 0.0;
        cfg.optim.lr_backbone = 0.0;
        let mut t = Trainer::new(cfg.clone(), &Device::Cpu).unwrap();
        let s = samples(2);
        let batch = collate(
            &s.iter().map(|x| x.image.clone()).collect::<Vec<_>>(),
            &s.iter().map(|x| x.gt.clone()).collect::<Vec<_>>(),
            &Device::Cpu,
        )
        .unwrap();
        let out = t.model().forward(&batch.images, &mut ForwardCtx::Eval).unwrap();
        let before = crate::losses::match_layers(&out, &batch.targets, &cfg.matcher).unwrap();
        t.train_step(&batch).unwrap();
        let out = t.model().forward(&batch.images, &mut ForwardCtx::Eval).unwrap();
        let after = crate::losses::match_layers(&out, &batch.targets, &cfg.matcher).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let data = samples(6);
        let mut cfg = tiny_cfg();
        cfg.optim.lr = 1e-3;

        let mut straight = Trainer::new(cfg.clone(), &Device::Cpu).unwrap();
        let mut losses_a = Vec::new();
        for _ in 0..2 {
            straight.run_epoch(&data, &mut |e| losses_a.push(e.loss.clone())).unwrap();
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.safetensors");
        let mut first = Trainer::new(
            RunConfig {
                max_steps: Some(4),
                ..cfg.clone()
            },
            &Device::Cpu,
        )
        .unwrap();
        let mut losses_b = Vec::new();
        first.run_epoch(&data, &mut |e| losses_b.push(e.loss.clone())).unwrap();
        let done = first.run_epoch(&data, &mut |e| losses_b.push(e.loss.clone())).unwrap();
        assert!(!done);
        assert_eq!(first.state().step, 4);
        first.save(&path).unwrap();
        let mut resumed = Trainer::resume(&path, &Device::Cpu, Some(cfg)).unwrap();
        assert_eq!((resumed.state().epoch, resumed.state().batch_in_epoch), (1, 1));
        resumed.run_epoch(&data, &mut |e| losses_b.push(e.loss.clone())).unwrap();
        assert_eq!(resumed.state().step, 6);
        assert_eq!(losses_a, losses_b);
        assert_eq!(params_of(&straight), params_of(&resumed));
    }

    #[test]
    fn collate_pads_and_rescales_boxes() {
        let s = samples(1);
        let small = image::imageops::crop_imm(&s[0].image, 0, 0, 32, 32).to_image();
        let big = Rgb32FImage::new(64, 48);
        let gt_big = GroundTruthSet::new("b", (64, 48), vec![]).unwrap();
        let b = collate(&[small, big], &[s[0].gt.clone(), gt_big], &Device::Cpu).unwrap();
        assert_eq!(b.images.dims(), &[2, 3, 48, 64]);
        let (orig, padded) = (&s[0].gt.instances[0], &b.targets[0].instances[0]);
        let to_px = |bx: &BoundingBox, w: f64, h: f64| [bx.cx * w, bx.cy * h, bx.w * w, bx.h * h];
        let (p0, p1) = (to_px(&orig.head_a, 32.0, 32.0), to_px(&padded.head_a, 64.0, 48.0));
        for k in 0..4 {
            assert!((p0[k] - p1[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn infer_is_deterministic_and_order_preserving() {
        let t = Trainer::new(tiny_cfg(), &Device::Cpu).unwrap();
        let s = samples(3);
        let imgs: Vec<(String, Rgb32FImage)> = s.iter().map(|x| (x.gt.image_id.clone(), x.image.clone())).collect();
        let cfg = EvalConfig::default();
        let a = infer(t.model(), &imgs, &cfg).unwrap();
        let b = infer(t.model(), &imgs, &cfg).unwrap();
        assert_eq!(a.images.len(), 3);
        for ((x, y), s) in a.images.iter().zip(&b.images).zip(&s) {
            assert_eq!(x.image_id, s.gt.image_id);
            assert_eq!(x.detections, y.detections);
        }
        assert!(a.images_per_sec > 0.0);
        assert!((a.images_per_sec * a.elapsed_secs - 3.0).abs() < 1e-6);
    }

    #[test]
    fn synth_data_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSceneSpec {
            seed: 4,
            ..Default::default()
        };
        let path = synth_data(&spec, 5, dir.path()).unwrap();
        let loaded = data::load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 5);
        let mem = synthetic_samples(&spec, 5).unwrap();
        for (a, b) in loaded.iter().zip(&mem) {
            assert_eq!(a.gt, b.gt);
            assert_eq!(a.image, b.image);
        }
        let dir2 = tempfile::tempdir().unwrap();
        let path2 = synth_data(&spec, 5, dir2.path()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
