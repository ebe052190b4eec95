//! Two-class mAP: an instance is correct only if both head boxes localize and
//! the gaze label matches.
//!
//! Ties in score keep input order (image order, then query index), so a run
//! is reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{MgtrError, Result};
use crate::geometry::{iou, BoundingBox};
use crate::instances::{GazeClass, GroundTruthSet, PredictionSet, NOT_MATCH, PERSON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    /// `p_h1[person] · p_h2[person] · p_gaze[class]`
    #[default]
    Product,
    Min,
    GazeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    #[default]
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub score_rule: ScoreRule,
    pub ap_method: ApMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            score_threshold: 0.0,
            score_rule: ScoreRule::Product,
            ap_method: ApMethod::AllPoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub query: usize,
    pub class: GazeClass,
    pub score: f64,
    pub box_a: BoundingBox,
    pub box_b: BoundingBox,
}

fn argmax(p: &[f64; 3]) -> usize {
    // first maximum wins
    (1..3).fold(0, |best, k| if p[k] > p[best] { k } else { best })
}

/// Detections of one image, in query order.
pub fn score_predictions(preds: &PredictionSet, threshold: f64, rule: ScoreRule) -> Vec<ScoredDetection> {
    let mut out = Vec::new();
    for (q, p) in preds.predictions.iter().enumerate() {
        if [&p.p_h1, &p.p_h2, &p.p_gaze].iter().any(|v| argmax(v) == NOT_MATCH) {
            continue;
        }
        let class = if p.p_gaze[GazeClass::Laeo.index()] >= p.p_gaze[GazeClass::NotLaeo.index()] {
            GazeClass::Laeo
        } else {
            GazeClass::NotLaeo
        };
        let g = p.p_gaze[class.index()];
        let score = match rule {
            ScoreRule::Product => p.p_h1[PERSON] * p.p_h2[PERSON] * g,
            ScoreRule::Min => p.p_h1[PERSON].min(p.p_h2[PERSON]).min(g),
            ScoreRule::GazeOnly => g,
        };
        if score >= threshold {
            out.push(ScoredDetection {
                query: q,
                class,
                score,
                box_a: p.box_a,
                box_b: p.box_b,
            });
        }
    }
    out
}

/// Smaller head IoU under the better of the two head orderings.
pub fn pair_overlap(a: (&BoundingBox, &BoundingBox), b: (&BoundingBox, &BoundingBox)) -> f64 {
    let i = |x: &BoundingBox, y: &BoundingBox| iou(&x.to_corner(), &y.to_corner());
    let straight = i(a.0, b.0).min(i(a.1, b.1));
    let crossed = i(a.0, b.1).min(i(a.1, b.0));
    straight.max(crossed)
}

/// Greedy one-to-one matching in descending score order. Returns, for each
/// detection, the ground-truth index it was credited with.
pub fn match_detections(dets: &[ScoredDetection], gts: &GroundTruthSet, iou_thresh: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&x, &y| dets[y].score.total_cmp(&dets[x].score));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for k in order {
        let d = &dets[k];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.instances.iter().enumerate() {
            if taken[j] || g.class() != d.class {
                continue;
            }
            let ov = pair_overlap((&d.box_a, &d.box_b), (&g.head_a, &g.head_b));
            if ov >= iou_thresh && best.is_none_or(|(_, b)| ov > b) {
                best = Some((j, ov));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out[k] = Some(j);
        }
    }
    out
}

/// AP of one class from detections in any order. Zero when there is no
/// ground truth.
pub fn average_precision(flags: &[bool], scores: &[f64], n_gt: usize, method: ApMethod) -> f64 {
    if n_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for k in order {
        if flags[k] {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    match method {
        ApMethod::AllPoint => {
            // precision envelope, then area under the recall steps
            for k in (0..precision.len().saturating_sub(1)).rev() {
                precision[k] = precision[k].max(precision[k + 1]);
            }
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub query: usize,
    pub class: GazeClass,
    pub score: f64,
    pub matched_gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub num_gt: usize,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub ap_laeo: f64,
    pub ap_not_laeo: f64,
    pub ap_rare: f64,
    pub ap_normal: f64,
    pub rare_class: GazeClass,
    pub recall: f64,
    pub num_gt: [usize; 2],
    pub num_detections: [usize; 2],
    pub num_images: usize,
    pub per_image: Vec<ImageRecord>,
    /// Filled in by callers that time inference.
    pub images_per_sec: Option<f64>,
}

/// Pools all images and computes the per-class APs, mAP and recall.
pub fn evaluate(results: &[(PredictionSet, GroundTruthSet)], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut flags = [Vec::new(), Vec::new()];
    let mut scores = [Vec::new(), Vec::new()];
    let mut num_gt = [0usize; 2];
    let mut found_any = [0usize; 2];
    let mut per_image = Vec::with_capacity(results.len());
    for (preds, gts) in results {
        if preds.image_id != gts.image_id {
            return Err(MgtrError::AssignmentMismatch(format!(
                "predictions for {:?} paired with ground truth for {:?}",
                preds.image_id, gts.image_id
            )));
        }
        for c in GazeClass::ALL {
            num_gt[c.index()] += gts.count_class(c);
        }
        // recall is measured without a score cut
        let all = score_predictions(preds, 0.0, cfg.score_rule);
        let all_matches = match_detections(&all, gts, cfg.iou_threshold);
        for (d, m) in all.iter().zip(&all_matches) {
            if m.is_some() {
                found_any[d.class.index()] += 1;
            }
        }
        let dets = score_predictions(preds, cfg.score_threshold, cfg.score_rule);
        let matches = match_detections(&dets, gts, cfg.iou_threshold);
        let mut records = Vec::with_capacity(dets.len());
        for (d, m) in dets.iter().zip(&matches) {
            flags[d.class.index()].push(m.is_some());
            scores[d.class.index()].push(d.score);
            records.push(DetectionRecord {
                query: d.query,
                class: d.class,
                score: d.score,
                matched_gt: *m,
            });
        }
        per_image.push(ImageRecord {
            image_id: gts.image_id.clone(),
            num_gt: gts.len(),
            detections: records,
        });
    }
    let ap = |c: GazeClass| average_precision(&flags[c.index()], &scores[c.index()], num_gt[c.index()], cfg.ap_method);
    let (ap_laeo, ap_not_laeo) = (ap(GazeClass::Laeo), ap(GazeClass::NotLaeo));
    let rare_class = if num_gt[GazeClass::Laeo.index()] <= num_gt[GazeClass::NotLaeo.index()] {
        GazeClass::Laeo
    } else {
        GazeClass::NotLaeo
    };
    let (ap_rare, ap_normal) = match rare_class {
        GazeClass::Laeo => (ap_laeo, ap_not_laeo),
        GazeClass::NotLaeo => (ap_not_laeo, ap_laeo),
    };
    let class_recall = |k: usize| if num_gt[k] == 0 { 0.0 } else { found_any[k] as f64 / num_gt[k] as f64 };
    Ok(EvalReport {
        map: (ap_laeo + ap_not_laeo) / 2.0,
        ap_laeo,
        ap_not_laeo,
        ap_rare,
        ap_normal,
        rare_class,
        recall: (class_recall(0) + class_recall(1)) / 2.0,
        num_gt,
        num_detections: [flags[0].len(), flags[1].len()],
        num_images: results.len(),
        per_image,
        images_per_sec: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{MutualGazeInstance, PredictedInstance};
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, 0.1, 0.1).unwrap()
    }

    fn pred(a: BoundingBox, bb: BoundingBox, gaze: [f64; 3]) -> PredictedInstance {
        PredictedInstance {
            p_h1: [1.0, 0.0, 0.0],
            p_h2: [1.0, 0.0, 0.0],
            p_gaze: gaze,
            box_a: a,
            box_b: bb,
        }
    }

    fn set(preds: Vec<PredictedInstance>) -> PredictionSet {
        PredictionSet {
            image_id: "i".into(),
            predictions: preds,
        }
    }

    fn one_gt(laeo: bool) -> GroundTruthSet {
        GroundTruthSet::new("i", (100, 100), vec![MutualGazeInstance::new(b(0.2, 0.2), b(0.7, 0.2), laeo).unwrap()])
            .unwrap()
    }

    #[test]
    fn scoring_rules() {
        let p = set(vec![
            pred(b(0.2, 0.2), b(0.7, 0.2), [1.0, 0.0, 0.0]),
            pred(b(0.2, 0.2), b(0.7, 0.2), [0.2, 0.3, 0.5]),
            PredictedInstance {
                p_h1: [0.6, 0.1, 0.3],
                p_h2: [0.5, 0.2, 0.3],
                ..pred(b(0.2, 0.2), b(0.7, 0.2), [0.1, 0.8, 0.1])
            },
        ]);
        let d = score_predictions(&p, 0.0, ScoreRule::Product);
        assert_eq!(d.len(), 2);
        assert_eq!((d[0].score, d[0].class), (1.0, GazeClass::Laeo));
        assert_eq!(d[1].class, GazeClass::NotLaeo);
        assert!((d[1].score - 0.6 * 0.5 * 0.8).abs() < 1e-15);
        assert!((score_predictions(&p, 0.0, ScoreRule::Min)[1].score - 0.5).abs() < 1e-15);
        assert_eq!(score_predictions(&p, 0.5, ScoreRule::Product).len(), 1);
    }

    #[test]
    fn matching_cases() {
        let gt = one_gt(true);
        let exact = score_predictions(&set(vec![pred(b(0.7, 0.2), b(0.2, 0.2), [0.9, 0.1, 0.0])]), 0.0, ScoreRule::Product);
        assert_eq!(match_detections(&exact, &gt, 0.5), vec![Some(0)]);

        let wrong = score_predictions(&set(vec![pred(b(0.2, 0.2), b(0.7, 0.2), [0.1, 0.9, 0.0])]), 0.0, ScoreRule::Product);
        assert_eq!(match_detections(&wrong, &gt, 0.5), vec![None]);

        let two = score_predictions(
            &set(vec![
                pred(b(0.2, 0.2), b(0.7, 0.2), [0.6, 0.4, 0.0]),
                pred(b(0.2, 0.2), b(0.7, 0.2), [0.9, 0.1, 0.0]),
            ]),
            0.0,
            ScoreRule::Product,
        );
        assert_eq!(match_detections(&two, &gt, 0.5), vec![None, Some(0)]);

        // one head off target is not enough
        let half = score_predictions(&set(vec![pred(b(0.2, 0.2), b(0.7, 0.6), [0.9, 0.1, 0.0])]), 0.0, ScoreRule::Product);
        assert_eq!(match_detections(&half, &gt, 0.5), vec![None]);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[true], &[0.9], 1, ApMethod::AllPoint), 1.0);
        assert_eq!(average_precision(&[false, true], &[0.9, 0.8], 1, ApMethod::AllPoint), 0.5);
        assert_eq!(average_precision(&[], &[], 3, ApMethod::AllPoint), 0.0);
        assert_eq!(average_precision(&[true], &[0.9], 1, ApMethod::ElevenPoint), 1.0);
        // [TP, FP, TP] with 2 GT: 1·½ + ⅔·½
        let ap = average_precision(&[true, false, true], &[0.9, 0.8, 0.7], 2, ApMethod::AllPoint);
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gt = GroundTruthSet::new(
            "i",
            (100, 100),
            vec![
                MutualGazeInstance::new(b(0.2, 0.2), b(0.7, 0.2), true).unwrap(),
                MutualGazeInstance::new(b(0.2, 0.2), b(0.5, 0.7), false).unwrap(),
                MutualGazeInstance::new(b(0.7, 0.2), b(0.5, 0.7), false).unwrap(),
            ],
        )
        .unwrap();
        let perfect = set(gt
            .instances
            .iter()
            .map(|g| {
                let mut gz = [0.0; 3];
                gz[g.class().index()] = 1.0;
                pred(g.head_a, g.head_b, gz)
            })
            .collect());
        let r = evaluate(&[(perfect, gt.clone())], &EvalConfig::default()).unwrap();
        assert_eq!((r.map, r.recall), (1.0, 1.0));
        assert_eq!(r.rare_class, GazeClass::Laeo);
        let r = evaluate(&[(set(vec![]), gt)], &EvalConfig::default()).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.map, (r.ap_rare + r.ap_normal) / 2.0);
    }

    proptest! {
        #[test]
        fn ap_rank_invariant_and_monotone(
            raw in prop::collection::vec((0.01f64..1.0, any::<bool>()), 1..30),
            scale in 0.1f64..10.0,
            extra_gt in 0usize..5,
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let flags: Vec<bool> = raw.iter().map(|r| r.1).collect();
            let n_gt = flags.iter().filter(|f| **f).count() + extra_gt;
            prop_assume!(n_gt > 0);
            let ap = average_precision(&flags, &scores, n_gt, ApMethod::AllPoint);
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            prop_assert_eq!(ap, average_precision(&flags, &scaled, n_gt, ApMethod::AllPoint));
            if let Some(k) = flags.iter().position(|f| !f) {
                let mut better = flags.clone();
                better[k] = true;
                let n2 = n_gt.max(better.iter().filter(|f| **f).count());
                if n2 == n_gt {
                    prop_assert!(average_precision(&better, &scores, n_gt, ApMethod::AllPoint) >= ap - 1e-12);
                }
            }
        }

        #[test]
        fn raising_gaze_confidence_never_lowers_rank(p in 0.5f64..0.95, bump in 0.0f64..0.05) {
            let other = [0.5, 0.3, 0.2];
            let mk = |g: f64| set(vec![
                pred(b(0.2, 0.2), b(0.7, 0.2), [g, 1.0 - g, 0.0]),
                pred(b(0.2, 0.2), b(0.7, 0.2), other),
            ]);
            let d0 = score_predictions(&mk(p), 0.0, ScoreRule::Product);
            let d1 = score_predictions(&mk(p + bump), 0.0, ScoreRule::Product);
            prop_assert!(d1[0].score >= d0[0].score);
            prop_assert!(!(d0[0].score >= d0[1].score) || d1[0].score >= d1[1].score);
        }
    }
}
