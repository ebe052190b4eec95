//! Mutual gaze instances: unordered (head, head, label) triples and the
//! per-query predictions the model emits for them.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{MgtrError, Result};
use crate::geometry::BoundingBox;

/// Person-confidence vocabulary.
pub const PERSON: usize = 0;
pub const NON_PERSON: usize = 1;
/// Shared by both vocabularies: the query corresponds to no instance.
pub const NOT_MATCH: usize = 2;
/// Gaze vocabulary.
pub const LAEO: usize = 0;
pub const NOT_LAEO: usize = 1;

pub const NUM_CLASSES: usize = 3;

/// Gaze class of a real (matched or detected) instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazeClass {
    Laeo,
    NotLaeo,
}

impl GazeClass {
    pub const ALL: [GazeClass; 2] = [GazeClass::Laeo, GazeClass::NotLaeo];

    pub fn from_label(laeo: bool) -> Self {
        if laeo {
            GazeClass::Laeo
        } else {
            GazeClass::NotLaeo
        }
    }

    /// Column in the gaze probability vector.
    pub fn index(self) -> usize {
        match self {
            GazeClass::Laeo => LAEO,
            GazeClass::NotLaeo => NOT_LAEO,
        }
    }
}

/// An unordered pair of heads with its looking-at-each-other label.
///
/// Equality and hashing ignore which head is stored first.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MutualGazeInstance {
    pub head_a: BoundingBox,
    pub head_b: BoundingBox,
    pub laeo: bool,
}

impl MutualGazeInstance {
    pub fn new(head_a: BoundingBox, head_b: BoundingBox, laeo: bool) -> Result<Self> {
        head_a.validate()?;
        head_b.validate()?;
        if head_a.bits() == head_b.bits() {
            return Err(MgtrError::InvalidInstance(format!(
                "both heads are the same box {head_a:?}"
            )));
        }
        Ok(MutualGazeInstance {
            head_a,
            head_b,
            laeo,
        })
    }

    pub fn swapped(&self) -> Self {
        MutualGazeInstance {
            head_a: self.head_b,
            head_b: self.head_a,
            laeo: self.laeo,
        }
    }

    pub fn class(&self) -> GazeClass {
        GazeClass::from_label(self.laeo)
    }

    pub fn heads(&self) -> [BoundingBox; 2] {
        [self.head_a, self.head_b]
    }
}

fn key_cmp(a: &BoundingBox, b: &BoundingBox) -> std::cmp::Ordering {
    let (ka, kb) = (a.order_key(), b.order_key());
    ka.iter()
        .zip(kb.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Puts the head with the smaller (cx, cy, w, h) key first. Idempotent.
pub fn canonicalize(inst: &MutualGazeInstance) -> MutualGazeInstance {
    if key_cmp(&inst.head_a, &inst.head_b).is_gt() {
        inst.swapped()
    } else {
        *inst
    }
}

impl PartialEq for MutualGazeInstance {
    fn eq(&self, other: &Self) -> bool {
        let (a, b) = (canonicalize(self), canonicalize(other));
        a.laeo == b.laeo && a.head_a.bits() == b.head_a.bits() && a.head_b.bits() == b.head_b.bits()
    }
}

impl Eq for MutualGazeInstance {}

impl Hash for MutualGazeInstance {
    fn hash<H: Hasher>(&self, state: &mut H) {
        let c = canonicalize(self);
        c.head_a.bits().hash(state);
        c.head_b.bits().hash(state);
        c.laeo.hash(state);
    }
}

/// Ground truth of one image: every unordered head pair, each recorded once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub image_id: String,
    /// (width, height) in pixels.
    pub image_size: (u32, u32),
    pub instances: Vec<MutualGazeInstance>,
}

impl GroundTruthSet {
    pub fn new(
        image_id: impl Into<String>,
        image_size: (u32, u32),
        instances: Vec<MutualGazeInstance>,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (k, inst) in instances.iter().enumerate() {
            // the label is not part of the pair identity
            let c = canonicalize(inst);
            if !seen.insert((c.head_a.bits(), c.head_b.bits())) {
                return Err(MgtrError::InvalidInstance(format!(
                    "instance {k} repeats an already recorded head pair"
                )));
            }
        }
        Ok(GroundTruthSet {
            image_id: image_id.into(),
            image_size,
            instances: instances.iter().map(canonicalize).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn count_class(&self, class: GazeClass) -> usize {
        self.instances.iter().filter(|i| i.class() == class).count()
    }
}

/// Enumerates all C(n,2) head pairs; pairs listed in `positives` are labeled
/// looking-at-each-other, all others not.
pub fn derive_negatives(
    image_id: impl Into<String>,
    image_size: (u32, u32),
    heads: &[BoundingBox],
    positives: &[(usize, usize)],
) -> Result<GroundTruthSet> {
    let n = heads.len();
    let mut positive = std::collections::HashSet::new();
    for &(i, j) in positives {
        if i >= n || j >= n {
            return Err(MgtrError::InvalidPair(i, j, format!("only {n} heads")));
        }
        if i == j {
            return Err(MgtrError::InvalidPair(i, j, "self pair".into()));
        }
        if !positive.insert((i.min(j), i.max(j))) {
            return Err(MgtrError::InvalidPair(i, j, "duplicate pair".into()));
        }
    }
    let mut instances = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            instances.push(MutualGazeInstance::new(
                heads[i],
                heads[j],
                positive.contains(&(i, j)),
            )?);
        }
    }
    GroundTruthSet::new(image_id, image_size, instances)
}

pub type ProbVector = [f64; NUM_CLASSES];

/// One decoded query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedInstance {
    /// person / non-person / not-match
    pub p_h1: ProbVector,
    pub p_h2: ProbVector,
    /// laeo / not-laeo / not-match
    pub p_gaze: ProbVector,
    pub box_a: BoundingBox,
    pub box_b: BoundingBox,
}

impl PredictedInstance {
    /// Exchanges the (box_a, p_h1) and (box_b, p_h2) slots.
    pub fn swapped(&self) -> Self {
        PredictedInstance {
            p_h1: self.p_h2,
            p_h2: self.p_h1,
            p_gaze: self.p_gaze,
            box_a: self.box_b,
            box_b: self.box_a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.p_h1, &self.p_h2, &self.p_gaze] {
            let s: f64 = p.iter().sum();
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (s - 1.0).abs() > 1e-5 {
                return Err(MgtrError::InvalidInstance(format!(
                    "probability vector {p:?} is not normalized"
                )));
            }
        }
        self.box_a.validate()?;
        self.box_b.validate()
    }
}

/// The N predictions of one image, one per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub image_id: String,
    pub predictions: Vec<PredictedInstance>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

/// Unnormalized head outputs of one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawQueryOutput {
    pub h1_logits: [f64; NUM_CLASSES],
    pub h2_logits: [f64; NUM_CLASSES],
    pub gaze_logits: [f64; NUM_CLASSES],
    pub box_a_logits: [f64; 4],
    pub box_b_logits: [f64; 4],
}

pub fn softmax3(logits: &[f64; NUM_CLASSES]) -> ProbVector {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Logistic squashing into the open unit interval. The clamp keeps extreme
/// logits from collapsing a width or height to zero.
pub fn squash(v: f64) -> f64 {
    const EDGE: f64 = 1e-7;
    (1.0 / (1.0 + (-v).exp())).clamp(EDGE, 1.0 - EDGE)
}

fn squash_box(l: &[f64; 4]) -> BoundingBox {
    BoundingBox {
        cx: squash(l[0]),
        cy: squash(l[1]),
        w: squash(l[2]),
        h: squash(l[3]),
    }
}

pub fn decode_predictions(image_id: impl Into<String>, raw: &[RawQueryOutput]) -> Result<PredictionSet> {
    let mut predictions = Vec::with_capacity(raw.len());
    for (q, r) in raw.iter().enumerate() {
        let all = r
            .h1_logits
            .iter()
            .chain(&r.h2_logits)
            .chain(&r.gaze_logits)
            .chain(&r.box_a_logits)
            .chain(&r.box_b_logits);
        if let Some(v) = all.clone().find(|v| !v.is_finite()) {
            return Err(MgtrError::NonFiniteQuery {
                query: q,
                what: format!("raw head output {v}"),
            });
        }
        predictions.push(PredictedInstance {
            p_h1: softmax3(&r.h1_logits),
            p_h2: softmax3(&r.h2_logits),
            p_gaze: softmax3(&r.gaze_logits),
            box_a: squash_box(&r.box_a_logits),
            box_b: squash_box(&r.box_b_logits),
        });
    }
    Ok(PredictionSet {
        image_id: image_id.into(),
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h).unwrap()
    }

    fn heads(n: usize) -> Vec<BoundingBox> {
        (0..n).map(|k| bb(0.1 + 0.15 * k as f64, 0.5, 0.1, 0.1)).collect()
    }

    #[test]
    fn three_heads_one_positive() {
        let gt = derive_negatives("img", (100, 100), &heads(3), &[(0, 1)]).unwrap();
        let h = heads(3);
        let expected = vec![
            MutualGazeInstance::new(h[0], h[1], true).unwrap(),
            MutualGazeInstance::new(h[0], h[2], false).unwrap(),
            MutualGazeInstance::new(h[1], h[2], false).unwrap(),
        ];
        assert_eq!(gt.instances, expected);
    }

    #[test]
    fn two_heads_no_positive() {
        let gt = derive_negatives("img", (100, 100), &heads(2), &[]).unwrap();
        assert_eq!(gt.len(), 1);
        assert!(!gt.instances[0].laeo);
    }

    #[test]
    fn five_heads_count() {
        let gt = derive_negatives("img", (100, 100), &heads(5), &[(0, 4), (3, 1)]).unwrap();
        assert_eq!(gt.len(), 10);
        assert_eq!(gt.count_class(GazeClass::Laeo), 2);
    }

    #[test]
    fn rejects_bad_pairs() {
        let h = heads(3);
        let e = derive_negatives("img", (1, 1), &h, &[(1, 1)]).unwrap_err();
        assert!(matches!(e, MgtrError::InvalidPair(1, 1, _)));
        let e = derive_negatives("img", (1, 1), &h, &[(0, 1), (1, 0)]).unwrap_err();
        assert!(matches!(e, MgtrError::InvalidPair(1, 0, _)));
        let e = derive_negatives("img", (1, 1), &h, &[(0, 3)]).unwrap_err();
        assert!(matches!(e, MgtrError::InvalidPair(0, 3, _)));
    }

    #[test]
    fn identical_heads_rejected() {
        let b = bb(0.5, 0.5, 0.1, 0.1);
        assert!(MutualGazeInstance::new(b, b, true).is_err());
    }

    #[test]
    fn duplicate_pairs_rejected() {
        let h = heads(2);
        let a = MutualGazeInstance::new(h[0], h[1], true).unwrap();
        assert!(GroundTruthSet::new("x", (1, 1), vec![a, a.swapped()]).is_err());
    }

    #[test]
    fn canonical_is_idempotent_and_swap_invariant() {
        let h = heads(2);
        let x = MutualGazeInstance::new(h[1], h[0], false).unwrap();
        let c = canonicalize(&x);
        assert_eq!(canonicalize(&c).head_a.bits(), c.head_a.bits());
        assert_eq!(c.head_a.bits(), h[0].bits());
        assert_eq!(x, x.swapped());
        let mut set = HashSet::new();
        set.insert(x);
        assert!(set.contains(&x.swapped()));
    }

    #[test]
    fn decode_basics() {
        let raw = RawQueryOutput {
            h1_logits: [0.3; 3],
            h2_logits: [-2.0; 3],
            gaze_logits: [5.0; 3],
            box_a_logits: [0.0; 4],
            box_b_logits: [0.0; 4],
        };
        let p = decode_predictions("img", &[raw]).unwrap();
        for v in p.predictions[0].p_h1.iter().chain(&p.predictions[0].p_gaze) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(p.predictions[0].box_a.as_array(), [0.5; 4]);

        let mut bad = raw;
        bad.gaze_logits[1] = f64::NAN;
        let e = decode_predictions("img", &[raw, bad]).unwrap_err();
        assert!(matches!(e, MgtrError::NonFiniteQuery { query: 1, .. }));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.01..0.5f64, 0.01..0.5f64)
            .prop_map(|(cx, cy, w, h)| BoundingBox { cx, cy, w, h })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn canonical_swap_property(a in arb_box(), b in arb_box(), laeo: bool) {
            prop_assume!(a.bits() != b.bits());
            let x = MutualGazeInstance::new(a, b, laeo).unwrap();
            let c1 = canonicalize(&x);
            let c2 = canonicalize(&x.swapped());
            prop_assert_eq!(c1.head_a.bits(), c2.head_a.bits());
            prop_assert_eq!(c1.head_b.bits(), c2.head_b.bits());
        }

        #[test]
        fn decoded_vectors_normalized(v in proptest::collection::vec(-30.0..30.0f64, 17)) {
            let raw = RawQueryOutput {
                h1_logits: [v[0], v[1], v[2]],
                h2_logits: [v[3], v[4], v[5]],
                gaze_logits: [v[6], v[7], v[8]],
                box_a_logits: [v[9], v[10], v[11], v[12]],
                box_b_logits: [v[13], v[14], v[15], v[16]],
            };
            let p = decode_predictions("q", &[raw]).unwrap();
            let q = &p.predictions[0];
            for vec in [q.p_h1, q.p_h2, q.p_gaze] {
                prop_assert!((vec.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            for f in q.box_a.as_array().iter().chain(q.box_b.as_array().iter()) {
                prop_assert!(*f > 0.0 && *f < 1.0);
            }
            prop_assert!(q.validate().is_ok());
        }
    }
}
