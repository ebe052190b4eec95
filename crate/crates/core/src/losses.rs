//! Training objective on a solved assignment: cross-entropy class terms plus
//! L1 and overlap box terms.
//!
//! Two implementations of the same objective live here: a host-side `f64`
//! evaluation on decoded predictions ([`training_loss`]) used for analysis
//! and cross-checks, and the differentiable tensor version
//! ([`tensor_training_loss`]) used for optimization.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{MgtrError, Result};
use crate::geometry::{l1_box, BoundingBox, OverlapKind};
use crate::instances::{GroundTruthSet, PredictionSet, NOT_MATCH, NUM_CLASSES, PERSON};
use crate::matcher::{check_weights, match_predictions, MatchAssignment, MatchWeights};
use crate::model::ops::{self, host_tensor};
use crate::model::{ForwardCtx, ForwardOutput, HeadOutputs, Mgtr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Sum over queries, divided by the number of real instances in the
    /// batch (at least 1).
    #[default]
    BatchInstances,
    /// Per-image sums divided by that image's instance count (at least 1),
    /// averaged over images.
    ImageInstances,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Scale of the not-match cross-entropy on ∅-assigned queries.
    pub eos_weight: f64,
    pub overlap: OverlapKind,
    pub normalization: LossNormalization,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1: 1.0,
            beta2: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 2.0,
            gamma1: 5.0,
            gamma2: 2.0,
            eos_weight: 0.1,
            overlap: OverlapKind::Giou,
            normalization: LossNormalization::BatchInstances,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        check_weights(&[
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("eos_weight", self.eos_weight),
        ])
    }

    pub fn zero() -> Self {
        LossWeights {
            beta1: 0.0,
            beta2: 0.0,
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            gamma1: 0.0,
            gamma2: 0.0,
            eos_weight: 0.0,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryLoss {
    pub image: usize,
    pub layer: usize,
    pub query: usize,
    pub value: f64,
}

/// Normalized loss components.
///
/// `class_*` already include their α (and ∅) weights; `box_l1` and
/// `box_giou` are unweighted, so
/// `total = β1·(class_h1 + class_h2 + class_gaze) + β2·(γ1·box_l1 + γ2·box_giou)`.
/// `box_giou` holds `Σ (1 − overlap)` for whichever overlap measure is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub class_h1: f64,
    pub class_h2: f64,
    pub class_gaze: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    /// Sums to `total`.
    pub per_query: Vec<QueryLoss>,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.beta1 * (self.class_h1 + self.class_h2 + self.class_gaze)
            + w.beta2 * (w.gamma1 * self.box_l1 + w.gamma2 * self.box_giou)
    }
}

fn check_provenance(preds: &PredictionSet, gts: &GroundTruthSet, sigma: &MatchAssignment) -> Result<()> {
    if sigma.image_id != gts.image_id || preds.image_id != gts.image_id {
        return Err(MgtrError::AssignmentMismatch(format!(
            "assignment for {:?}, predictions for {:?}, ground truth for {:?}",
            sigma.image_id, preds.image_id, gts.image_id
        )));
    }
    if sigma.sigma.len() != preds.len() || sigma.num_real != gts.len() {
        return Err(MgtrError::AssignmentMismatch(format!(
            "assignment covers {} predictions / {} instances, got {} / {}",
            sigma.sigma.len(),
            sigma.num_real,
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Per-image normalizers for a batch with the given instance counts.
fn normalizers(counts: &[usize], norm: LossNormalization) -> Vec<f64> {
    match norm {
        LossNormalization::BatchInstances => {
            let total = counts.iter().sum::<usize>().max(1) as f64;
            vec![total; counts.len()]
        }
        LossNormalization::ImageInstances => counts
            .iter()
            .map(|&m| m.max(1) as f64 * counts.len() as f64)
            .collect(),
    }
}

/// Class-target weights for one image: `[N, 3]` for each of h1, h2, gaze.
struct ClassTargets {
    h1: Vec<f64>,
    h2: Vec<f64>,
    gaze: Vec<f64>,
}

fn class_targets(gts: &GroundTruthSet, sigma: &MatchAssignment, w: &LossWeights) -> ClassTargets {
    let n = sigma.sigma.len();
    let mut t = ClassTargets {
        h1: vec![0.0; n * NUM_CLASSES],
        h2: vec![0.0; n * NUM_CLASSES],
        gaze: vec![0.0; n * NUM_CLASSES],
    };
    for i in 0..n {
        match sigma.target(i) {
            Some((j, o)) => {
                // α1 goes with whichever slot explains ground-truth head a.
                let slot_alpha = if o.pred_slot(0) == 0 {
                    [w.alpha1, w.alpha2]
                } else {
                    [w.alpha2, w.alpha1]
                };
                t.h1[i * NUM_CLASSES + PERSON] = slot_alpha[0];
                t.h2[i * NUM_CLASSES + PERSON] = slot_alpha[1];
                t.gaze[i * NUM_CLASSES + gts.instances[j].class().index()] = w.alpha3;
            }
            None => {
                t.h1[i * NUM_CLASSES + NOT_MATCH] = w.alpha1 * w.eos_weight;
                t.h2[i * NUM_CLASSES + NOT_MATCH] = w.alpha2 * w.eos_weight;
                t.gaze[i * NUM_CLASSES + NOT_MATCH] = w.alpha3 * w.eos_weight;
            }
        }
    }
    t
}

/// One box correspondence: (prediction, slot 0/1, target box).
fn box_pairs(gts: &GroundTruthSet, sigma: &MatchAssignment) -> Vec<(usize, usize, BoundingBox)> {
    let mut pairs = Vec::new();
    for i in 0..sigma.sigma.len() {
        if let Some((j, o)) = sigma.target(i) {
            for (g, head) in gts.instances[j].heads().into_iter().enumerate() {
                pairs.push((i, o.pred_slot(g), head));
            }
        }
    }
    pairs
}

/// One element of a (possibly multi-layer) batch loss evaluation.
pub struct LossItem<'a> {
    pub preds: &'a PredictionSet,
    pub gts: &'a GroundTruthSet,
    pub sigma: &'a MatchAssignment,
    /// Position of the image in its batch.
    pub image: usize,
    pub layer: usize,
}

/// Host-side loss of a batch. Items sharing `image` share a normalizer.
pub fn batch_training_loss(items: &[LossItem], w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let num_images = items.iter().map(|it| it.image + 1).max().unwrap_or(0);
    let mut counts = vec![0usize; num_images];
    for it in items {
        check_provenance(it.preds, it.gts, it.sigma)?;
        counts[it.image] = it.gts.len();
    }
    let norms = normalizers(&counts, w.normalization);
    let mut out = LossBreakdown {
        total: 0.0,
        class_h1: 0.0,
        class_h2: 0.0,
        class_gaze: 0.0,
        box_l1: 0.0,
        box_giou: 0.0,
        per_query: Vec::new(),
    };
    for it in items {
        let norm = norms[it.image];
        let t = class_targets(it.gts, it.sigma, w);
        let mut per_query = vec![0.0; it.preds.len()];
        for (i, p) in it.preds.predictions.iter().enumerate() {
            let ce = |probs: &[f64; NUM_CLASSES], tw: &[f64]| -> f64 {
                (0..NUM_CLASSES)
                    .filter(|&c| tw[c] != 0.0)
                    .map(|c| -tw[c] * probs[c].ln())
                    .sum()
            };
            let r = i * NUM_CLASSES..(i + 1) * NUM_CLASSES;
            let (c1, c2, cg) = (
                ce(&p.p_h1, &t.h1[r.clone()]) / norm,
                ce(&p.p_h2, &t.h2[r.clone()]) / norm,
                ce(&p.p_gaze, &t.gaze[r]) / norm,
            );
            out.class_h1 += c1;
            out.class_h2 += c2;
            out.class_gaze += cg;
            per_query[i] += w.beta1 * (c1 + c2 + cg);
        }
        for (i, slot, target) in box_pairs(it.gts, it.sigma) {
            let pred = &it.preds.predictions[i];
            let b = if slot == 0 { pred.box_a } else { pred.box_b };
            let l1 = l1_box(&b, &target) / norm;
            let ov = (1.0 - w.overlap.eval(&b.to_corner(), &target.to_corner())) / norm;
            out.box_l1 += l1;
            out.box_giou += ov;
            per_query[i] += w.beta2 * (w.gamma1 * l1 + w.gamma2 * ov);
        }
        out.per_query.extend(per_query.into_iter().enumerate().map(|(q, value)| QueryLoss {
            image: it.image,
            layer: it.layer,
            query: q,
            value,
        }));
    }
    out.total = out.weighted_total(w);
    Ok(out)
}

/// Loss of a single image's predictions under a solved assignment.
pub fn training_loss(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    sigma: &MatchAssignment,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    batch_training_loss(
        &[LossItem {
            preds,
            gts,
            sigma,
            image: 0,
            layer: 0,
        }],
        w,
    )
}

fn col(t: &Tensor, k: usize) -> Result<Tensor> {
    Ok(t.narrow(1, k, 1)?.squeeze(1)?)
}

/// `1 − overlap` for `[K, 4]` center-format predictions and targets.
pub fn tensor_overlap_loss(pred: &Tensor, target: &Tensor, kind: OverlapKind) -> Result<Tensor> {
    let eps = crate::geometry::ENCLOSING_EPS;
    let corners = |b: &Tensor| -> Result<[Tensor; 4]> {
        let (cx, cy, w, h) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);
        let (hw, hh) = ((&w * 0.5)?, (&h * 0.5)?);
        Ok([(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?])
    };
    let [px1, py1, px2, py2] = corners(pred)?;
    let [tx1, ty1, tx2, ty2] = corners(target)?;
    let iw = (px2.minimum(&tx2)? - px1.maximum(&tx1)?)?.maximum(0.0)?;
    let ih = (py2.minimum(&ty2)? - py1.maximum(&ty1)?)?.maximum(0.0)?;
    let inter = (iw * ih)?;
    let area_p = ((&px2 - &px1)? * (&py2 - &py1)?)?;
    let area_t = ((&tx2 - &tx1)? * (&ty2 - &ty1)?)?;
    let union = ((area_p + area_t)? - &inter)?;
    let iou = (&inter / &union)?;
    let hull_w = (px2.maximum(&tx2)? - px1.minimum(&tx1)?)?;
    let hull_h = (py2.maximum(&ty2)? - py1.minimum(&ty1)?)?;
    let overlap = match kind {
        OverlapKind::Giou => {
            let hull = (hull_w * hull_h)?;
            (&iou - ((&hull - &union)? / hull.maximum(eps)?)?)?
        }
        OverlapKind::Diou | OverlapKind::Ciou => {
            let rho2 = ((col(pred, 0)? - col(target, 0)?)?.sqr()? + (col(pred, 1)? - col(target, 1)?)?.sqr()?)?;
            let diag2 = (hull_w.sqr()? + hull_h.sqr()?)?;
            let diou = (&iou - (rho2 / diag2.maximum(eps)?)?)?;
            if kind == OverlapKind::Diou {
                diou
            } else {
                let ratio = |b: &Tensor| -> Result<Tensor> { ops::atan(&(col(b, 2)? / col(b, 3)?)?) };
                let k = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
                let v = ((ratio(pred)? - ratio(target)?)?.sqr()? * k)?;
                // the trade-off factor is held constant in the backward pass
                let vd = v.detach();
                let denom = (iou.detach().affine(-1.0, 1.0)? + &vd)?.maximum(1e-12)?;
                let alpha = (&vd / denom)?;
                (diou - (alpha * v)?)?
            }
        }
    };
    Ok(overlap.affine(-1.0, 1.0)?)
}

/// Differentiable loss for one supervised layer group.
///
/// `assignments[l][b]` is the assignment of layer `l`, image `b`.
pub fn tensor_training_loss(
    layers: &[HeadOutputs],
    targets: &[GroundTruthSet],
    assignments: &[Vec<MatchAssignment>],
    w: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    w.validate()?;
    if layers.len() != assignments.len() {
        return Err(MgtrError::AssignmentMismatch(format!(
            "{} layers but {} assignment groups",
            layers.len(),
            assignments.len()
        )));
    }
    let first = &layers[0];
    let (b, n, _) = first.h1_logits.dims3()?;
    let (dtype, device) = (first.h1_logits.dtype(), first.h1_logits.device().clone());
    if targets.len() != b {
        return Err(MgtrError::AssignmentMismatch(format!("{} targets for batch of {b}", targets.len())));
    }
    let counts: Vec<usize> = targets.iter().map(|g| g.len()).collect();
    let norms = normalizers(&counts, w.normalization);

    let mut total: Option<Tensor> = None;
    let mut out = LossBreakdown {
        total: 0.0,
        class_h1: 0.0,
        class_h2: 0.0,
        class_gaze: 0.0,
        box_l1: 0.0,
        box_giou: 0.0,
        per_query: Vec::new(),
    };
    let mut accumulate = |t: Tensor| -> Result<()> {
        total = Some(match total.take() {
            Some(acc) => (acc + t)?,
            None => t,
        });
        Ok(())
    };

    for (layer, (heads, asgs)) in layers.iter().zip(assignments).enumerate() {
        if asgs.len() != b {
            return Err(MgtrError::AssignmentMismatch(format!("layer {layer}: {} assignments for batch of {b}", asgs.len())));
        }
        let mut tw = [vec![], vec![], vec![]];
        let mut box_idx: Vec<u32> = Vec::new();
        let mut box_tgt: Vec<f64> = Vec::new();
        let mut box_norm: Vec<f64> = Vec::new();
        let mut box_row: Vec<usize> = Vec::new();
        for (img, (gts, sigma)) in targets.iter().zip(asgs).enumerate() {
            if sigma.image_id != gts.image_id || sigma.sigma.len() != n || sigma.num_real != gts.len() {
                return Err(MgtrError::AssignmentMismatch(format!(
                    "layer {layer}, image {img}: assignment for {:?} does not fit {:?}",
                    sigma.image_id, gts.image_id
                )));
            }
            let t = class_targets(gts, sigma, w);
            let inv = 1.0 / norms[img];
            tw[0].extend(t.h1.iter().map(|v| v * inv));
            tw[1].extend(t.h2.iter().map(|v| v * inv));
            tw[2].extend(t.gaze.iter().map(|v| v * inv));
            for (i, slot, target) in box_pairs(gts, sigma) {
                let row = img * n + i;
                box_idx.push((slot * b * n + row) as u32);
                box_tgt.extend(target.as_array());
                box_norm.push(inv);
                box_row.push(row);
            }
        }
        let mut per_row = vec![0.0f64; b * n];
        let logits = [&heads.h1_logits, &heads.h2_logits, &heads.gaze_logits];
        for (k, (lg, weights)) in logits.iter().zip(tw).enumerate() {
            let wt = host_tensor(weights, &[b * n, NUM_CLASSES], dtype, &device)?;
            let lsm = ops::log_softmax_last(&lg.reshape((b * n, NUM_CLASSES))?)?;
            let rows = (lsm * wt)?.sum(D::Minus1)?.neg()?;
            let rows_host = rows.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let s: f64 = rows_host.iter().sum();
            match k {
                0 => out.class_h1 += s,
                1 => out.class_h2 += s,
                _ => out.class_gaze += s,
            }
            for (r, v) in rows_host.iter().enumerate() {
                per_row[r] += w.beta1 * v;
            }
            accumulate((rows.sum_all()? * w.beta1)?)?;
        }
        if !box_idx.is_empty() {
            let k = box_idx.len();
            let all = Tensor::cat(
                &[
                    heads.box_a()?.reshape((b * n, 4))?,
                    heads.box_b()?.reshape((b * n, 4))?,
                ],
                0,
            )?;
            let idx = Tensor::from_vec(box_idx, k, &device)?;
            let pred = all.index_select(&idx, 0)?;
            let tgt = host_tensor(box_tgt, &[k, 4], dtype, &device)?;
            let norm = host_tensor(box_norm, &[k], dtype, &device)?;
            let l1 = (ops::abs_zero_subgrad(&(&pred - &tgt)?)?.sum(D::Minus1)? * &norm)?;
            let ov = (tensor_overlap_loss(&pred, &tgt, w.overlap)? * &norm)?;
            let (l1_host, ov_host) = (
                l1.to_dtype(DType::F64)?.to_vec1::<f64>()?,
                ov.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            );
            for ((r, a), c) in box_row.iter().zip(&l1_host).zip(&ov_host) {
                per_row[*r] += w.beta2 * (w.gamma1 * a + w.gamma2 * c);
            }
            out.box_l1 += l1_host.iter().sum::<f64>();
            out.box_giou += ov_host.iter().sum::<f64>();
            let box_total = ((l1.sum_all()? * w.gamma1)? + (ov.sum_all()? * w.gamma2)?)?;
            accumulate((box_total * w.beta2)?)?;
        }
        out.per_query.extend(per_row.into_iter().enumerate().map(|(r, value)| QueryLoss {
            image: r / n,
            layer,
            query: r % n,
            value,
        }));
    }
    out.total = out.weighted_total(w);
    let total = total.expect("at least one layer");
    Ok((total, out))
}

/// Solves the assignment of every supervised layer for every image.
pub fn match_layers(
    output: &ForwardOutput,
    targets: &[GroundTruthSet],
    w: &MatchWeights,
) -> Result<Vec<Vec<MatchAssignment>>> {
    let ids: Vec<String> = targets.iter().map(|t| t.image_id.clone()).collect();
    output
        .layers
        .iter()
        .map(|heads| {
            let preds = heads.decode(&ids)?;
            preds
                .iter()
                .zip(targets)
                .map(|(p, g)| match_predictions(p, g, w))
                .collect()
        })
        .collect()
}

/// A batch of same-sized normalized images and their targets.
pub struct Batch {
    /// `[B, 3, H, W]`
    pub images: Tensor,
    pub targets: Vec<GroundTruthSet>,
}

/// Gradients of the total loss with respect to every trainable parameter.
pub struct GradientRecord {
    pub loss: LossBreakdown,
    pub loss_tensor: Tensor,
    pub assignments: Vec<Vec<MatchAssignment>>,
    pub grads: BTreeMap<String, Tensor>,
}

/// Forward, match, loss, backward. Fails on a non-finite loss or gradient.
pub fn loss_gradients(
    model: &Mgtr,
    batch: &Batch,
    match_w: &MatchWeights,
    loss_w: &LossWeights,
    ctx: &mut ForwardCtx,
) -> Result<GradientRecord> {
    let output = model.forward(&batch.images, ctx)?;
    let assignments = match_layers(&output, &batch.targets, match_w)?;
    loss_gradients_with(model, &output, batch, assignments, loss_w)
}

/// Like [`loss_gradients`] but with the forward pass and assignments given.
pub fn loss_gradients_with(
    model: &Mgtr,
    output: &ForwardOutput,
    batch: &Batch,
    assignments: Vec<Vec<MatchAssignment>>,
    loss_w: &LossWeights,
) -> Result<GradientRecord> {
    let (loss_tensor, loss) = tensor_training_loss(&output.layers, &batch.targets, &assignments, loss_w)?;
    if !loss.total.is_finite() {
        return Err(MgtrError::NonFiniteLoss { batch: 0 });
    }
    let store = loss_tensor.backward()?;
    let mut grads = BTreeMap::new();
    for (name, p) in model.params().trainable() {
        let g = match store.get(p.var.as_tensor()) {
            Some(g) => g.detach(),
            None => p.var.as_tensor().zeros_like()?,
        };
        let finite = g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().all(|v| v.is_finite());
        if !finite {
            return Err(MgtrError::NonFiniteGradient(name.clone()));
        }
        grads.insert(name.clone(), g);
    }
    Ok(GradientRecord {
        loss,
        loss_tensor,
        assignments,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::instances::{MutualGazeInstance, PredictedInstance};
    use crate::model::{BackboneConfig, ModelConfig, Precision};
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_box(rng: &mut impl Rng) -> BoundingBox {
        let w = rng.random_range(0.05..0.3);
        let h = rng.random_range(0.05..0.3);
        BoundingBox::new(
            rng.random_range(w / 2.0..1.0 - w / 2.0),
            rng.random_range(h / 2.0..1.0 - h / 2.0),
            w,
            h,
        )
        .unwrap()
    }

    fn rand_gt(rng: &mut impl Rng, id: &str, m: usize) -> GroundTruthSet {
        let instances = (0..m)
            .map(|_| MutualGazeInstance::new(rand_box(rng), rand_box(rng), rng.random_bool(0.4)).unwrap())
            .collect();
        GroundTruthSet::new(id, (64, 64), instances).unwrap()
    }

    fn rand_heads(rng: &mut impl Rng, b: usize, n: usize) -> Vec<Var> {
        [3, 3, 3, 4, 4]
            .iter()
            .map(|&k| {
                let data: Vec<f64> = (0..b * n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
                Var::from_vec(data, (b, n, k), &Device::Cpu).unwrap()
            })
            .collect()
    }

    fn heads_of(vars: &[Var]) -> HeadOutputs {
        HeadOutputs {
            h1_logits: vars[0].as_tensor().clone(),
            h2_logits: vars[1].as_tensor().clone(),
            gaze_logits: vars[2].as_tensor().clone(),
            box_a_logits: vars[3].as_tensor().clone(),
            box_b_logits: vars[4].as_tensor().clone(),
        }
    }

    fn assign(heads: &HeadOutputs, gts: &[GroundTruthSet]) -> (Vec<PredictionSet>, Vec<MatchAssignment>) {
        let ids: Vec<String> = gts.iter().map(|g| g.image_id.clone()).collect();
        let preds = heads.decode(&ids).unwrap();
        let sig = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| match_predictions(p, g, &MatchWeights::default()).unwrap())
            .collect();
        (preds, sig)
    }

    fn uniform_pred(b: BoundingBox) -> PredictedInstance {
        let u = [1.0 / 3.0; 3];
        PredictedInstance {
            p_h1: u,
            p_h2: u,
            p_gaze: u,
            box_a: b,
            box_b: b,
        }
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gts = rand_gt(&mut rng, "img", 3);
        let mut preds: Vec<PredictedInstance> = gts
            .instances
            .iter()
            .map(|g| {
                let mut p_gaze = [0.0; 3];
                p_gaze[g.class().index()] = 1.0;
                PredictedInstance {
                    p_h1: [1.0, 0.0, 0.0],
                    p_h2: [1.0, 0.0, 0.0],
                    p_gaze,
                    box_a: g.head_a,
                    box_b: g.head_b,
                }
            })
            .collect();
        let empty = PredictedInstance {
            p_h1: [0.0, 0.0, 1.0],
            p_h2: [0.0, 0.0, 1.0],
            p_gaze: [0.0, 0.0, 1.0],
            ..preds[0]
        };
        preds.push(empty);
        preds.swap(0, 3);
        let preds = PredictionSet {
            image_id: "img".into(),
            predictions: preds,
        };
        let sigma = match_predictions(&preds, &gts, &MatchWeights::default()).unwrap();
        let l = training_loss(&preds, &gts, &sigma, &LossWeights::default()).unwrap();
        assert!(l.total.abs() < 1e-12, "{l:?}");
    }

    #[test]
    fn uniform_empty_image() {
        let gts = GroundTruthSet::new("e", (64, 64), vec![]).unwrap();
        let b = BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let preds = PredictionSet {
            image_id: "e".into(),
            predictions: vec![uniform_pred(b); 3],
        };
        let sigma = match_predictions(&preds, &gts, &MatchWeights::default()).unwrap();
        let w = LossWeights {
            eos_weight: 1.0,
            ..Default::default()
        };
        let l = training_loss(&preds, &gts, &sigma, &w).unwrap();
        let per = w.beta1 * (w.alpha1 + w.alpha2 + w.alpha3) * 3f64.ln();
        for q in &l.per_query {
            assert!((q.value - per).abs() < 1e-12);
        }
        // summed over the three queries, normalized by max(1, M) = 1
        assert!((l.total - 3.0 * per).abs() < 1e-12);
        // the ∅ down-weighting scales ∅ rows linearly
        let l_default = training_loss(&preds, &gts, &sigma, &LossWeights::default()).unwrap();
        assert!((l_default.total - 0.1 * l.total).abs() < 1e-12);
    }

    #[test]
    fn mismatched_assignment_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g1 = rand_gt(&mut rng, "a", 2);
        let g2 = rand_gt(&mut rng, "b", 2);
        let preds = PredictionSet {
            image_id: "a".into(),
            predictions: vec![uniform_pred(rand_box(&mut rng)); 4],
        };
        let sigma = match_predictions(&preds, &g1, &MatchWeights::default()).unwrap();
        assert!(matches!(
            training_loss(&preds, &g2, &sigma, &LossWeights::default()),
            Err(MgtrError::AssignmentMismatch(_))
        ));
    }

    #[test]
    fn host_and_tensor_losses_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for overlap in [OverlapKind::Giou, OverlapKind::Diou, OverlapKind::Ciou] {
            let (b, n) = (3, 6);
            let gts: Vec<GroundTruthSet> = (0..b).map(|i| rand_gt(&mut rng, &format!("i{i}"), i + 1)).collect();
            let vars = rand_heads(&mut rng, b, n);
            let heads = heads_of(&vars);
            let (preds, sig) = assign(&heads, &gts);
            let w = LossWeights {
                overlap,
                ..Default::default()
            };
            let items: Vec<LossItem> = (0..b)
                .map(|i| LossItem {
                    preds: &preds[i],
                    gts: &gts[i],
                    sigma: &sig[i],
                    image: i,
                    layer: 0,
                })
                .collect();
            let host = batch_training_loss(&items, &w).unwrap();
            let (t, tens) = tensor_training_loss(&[heads], &gts, &[sig], &w).unwrap();
            let t = t.to_scalar::<f64>().unwrap();
            assert!((host.total - t).abs() < 1e-9, "{overlap:?}: {} vs {t}", host.total);
            assert!((tens.total - t).abs() < 1e-9);
            for (a, b) in [
                (host.class_h1, tens.class_h1),
                (host.class_gaze, tens.class_gaze),
                (host.box_l1, tens.box_l1),
                (host.box_giou, tens.box_giou),
            ] {
                assert!((a - b).abs() < 1e-9);
            }
            let per: f64 = tens.per_query.iter().map(|q| q.value).sum();
            assert!((per - t).abs() < 1e-9);
        }
    }

    #[test]
    fn l1_gradient_sign_and_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gts = vec![rand_gt(&mut rng, "g", 1)];
        let vars = rand_heads(&mut rng, 1, 1);
        let heads = heads_of(&vars);
        let (_, sig) = assign(&heads, &gts);
        let w = LossWeights {
            beta1: 0.0,
            gamma2: 0.0,
            ..Default::default()
        };
        let (loss, _) = tensor_training_loss(&[heads.clone()], &gts, &[sig.clone()], &w).unwrap();
        let grads = loss.backward().unwrap();
        let (_, o) = sig[0].target(0).unwrap();
        let gt_heads = gts[0].instances[0].heads();
        for g_slot in 0..2 {
            let p_slot = o.pred_slot(g_slot);
            let var = &vars[3 + p_slot];
            let logits = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let grad = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let target = gt_heads[g_slot].as_array();
            for k in 0..4 {
                let s = 1.0 / (1.0 + (-logits[k]).exp());
                // d/dx of γ1·β2·|σ(x) − t| = γ1·β2·sign(σ(x) − t)·σ'(x)
                let expected = w.gamma1 * w.beta2 * (s - target[k]).signum() * s * (1.0 - s);
                assert!((grad[k] - expected).abs() < 1e-12, "{} vs {expected}", grad[k]);
            }
        }
    }

    #[test]
    fn loss_is_swap_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gts = vec![rand_gt(&mut rng, "s", 3)];
        let swapped = vec![GroundTruthSet {
            instances: gts[0].instances.iter().map(|g| g.swapped()).collect(),
            ..gts[0].clone()
        }];
        let vars = rand_heads(&mut rng, 1, 5);
        let heads = heads_of(&vars);
        let (_, s1) = assign(&heads, &gts);
        let (_, s2) = assign(&heads, &swapped);
        let w = LossWeights::default();
        let (a, _) = tensor_training_loss(&[heads.clone()], &gts, &[s1], &w).unwrap();
        let (b, _) = tensor_training_loss(&[heads], &swapped, &[s2], &w).unwrap();
        let (a, b) = (a.to_scalar::<f64>().unwrap(), b.to_scalar::<f64>().unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    fn gradcheck_model() -> (Mgtr, Batch) {
        let cfg = ModelConfig {
            d_model: 32,
            num_queries: 8,
            enc_layers: 1,
            dec_layers: 1,
            num_heads: 4,
            ffn_dim: 64,
            backbone: BackboneConfig::Tiny { channels: vec![4, 8, 8] },
            aux_loss: true,
            dropout: 0.0,
            precision: Precision::F64,
        };
        let model = Mgtr::new(&cfg, 11, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let px: Vec<f64> = (0..2 * 3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let images = Tensor::from_vec(px, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let targets = vec![rand_gt(&mut rng, "a", 2), rand_gt(&mut rng, "b", 1)];
        (model, Batch { images, targets })
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let (model, batch) = gradcheck_model();
        let rec = loss_gradients(
            &model,
            &batch,
            &MatchWeights::default(),
            &LossWeights::zero(),
            &mut ForwardCtx::Eval,
        )
        .unwrap();
        assert_eq!(rec.loss.total, 0.0);
        for (name, g) in &rec.grads {
            let m = g.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert_eq!(m, 0.0, "{name}");
        }
    }

    #[test]
    fn finite_difference_gradients() {
        let (model, batch) = gradcheck_model();
        let (mw, lw) = (MatchWeights::default(), LossWeights::default());
        let rec = loss_gradients(&model, &batch, &mw, &lw, &mut ForwardCtx::Eval).unwrap();
        let assignments = rec.assignments.clone();
        let eval = |model: &Mgtr| -> f64 {
            let out = model.forward(&batch.images, &mut ForwardCtx::Eval).unwrap();
            let (t, _) = tensor_training_loss(&out.layers, &batch.targets, &assignments, &lw).unwrap();
            t.to_scalar::<f64>().unwrap()
        };
        let names: Vec<String> = rec.grads.keys().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        for _ in 0..20 {
            let name = &names[rng.random_range(0..names.len())];
            let original = model.params().get(name).unwrap().var.as_tensor().flatten_all().unwrap();
            let mut data = original.to_vec1::<f64>().unwrap();
            let k = rng.random_range(0..data.len());
            let shape = model.params().get(name).unwrap().var.shape().clone();
            let x0 = data[k];
            let mut at = |v: f64| {
                data[k] = v;
                let t = Tensor::from_vec(data.clone(), shape.clone(), &Device::Cpu).unwrap();
                model.params().set(name, &t).unwrap();
                eval(&model)
            };
            let numeric = (at(x0 + h) - at(x0 - h)) / (2.0 * h);
            at(x0);
            let analytic = rec.grads[name].flatten_all().unwrap().to_vec1::<f64>().unwrap()[k];
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            assert!(err < 1e-3, "{name}[{k}]: analytic {analytic}, numeric {numeric}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn loss_is_nonnegative(seed in any::<u64>(), m in 0usize..4, extra in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts = vec![rand_gt(&mut rng, "p", m)];
            let vars = rand_heads(&mut rng, 1, m + extra.max(1));
            let heads = heads_of(&vars);
            let (preds, sig) = assign(&heads, &gts);
            let l = training_loss(&preds[0], &gts[0], &sig[0], &LossWeights::default()).unwrap();
            prop_assert!(l.total >= 0.0);
            prop_assert!((l.weighted_total(&LossWeights::default()) - l.total).abs() < 1e-9);
        }
    }
}
