//! Prediction-to-ground-truth assignment.
//!
//! The ground truth of an image is padded with ∅ slots up to the query count
//! so the match becomes a square assignment problem, solved exactly with a
//! shortest-augmenting-path Hungarian method in O(n³).

use serde::{Deserialize, Serialize};

use crate::error::{MgtrError, Result};
use crate::geometry::{l1_box, OverlapKind};
use crate::instances::{GroundTruthSet, MutualGazeInstance, PredictedInstance, PredictionSet, PERSON};

/// Weights of the matching cost. Defaults are the published matching values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub overlap: OverlapKind,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            beta1: 1.2,
            beta2: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 2.0,
            gamma1: 5.0,
            gamma2: 2.0,
            overlap: OverlapKind::Giou,
        }
    }
}

pub(crate) fn check_weights(ws: &[(&str, f64)]) -> Result<()> {
    for (name, v) in ws {
        if !v.is_finite() || *v < 0.0 {
            return Err(MgtrError::Config(format!("weight {name} = {v} must be finite and >= 0")));
        }
    }
    Ok(())
}

impl MatchWeights {
    pub fn validate(&self) -> Result<()> {
        check_weights(&[
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
        ])
    }
}

/// How the two predicted head slots line up with the two ground-truth heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    /// box_a ↔ head_a, box_b ↔ head_b
    Straight,
    /// box_a ↔ head_b, box_b ↔ head_a
    Crossed,
}

impl Orientation {
    /// Predicted slot (0 = a, 1 = b) paired with ground-truth head `gt_slot`.
    pub fn pred_slot(self, gt_slot: usize) -> usize {
        match self {
            Orientation::Straight => gt_slot,
            Orientation::Crossed => 1 - gt_slot,
        }
    }
}

fn oriented_cost(
    pred: &PredictedInstance,
    gt: &MutualGazeInstance,
    w: &MatchWeights,
    o: Orientation,
) -> f64 {
    let p_person = [pred.p_h1[PERSON], pred.p_h2[PERSON]];
    let boxes = [pred.box_a, pred.box_b];
    let gt_heads = gt.heads();
    let alphas = [w.alpha1, w.alpha2];
    let mut class = w.alpha3 * pred.p_gaze[gt.class().index()];
    let mut boxc = 0.0;
    for (g, gt_box) in gt_heads.iter().enumerate() {
        let s = o.pred_slot(g);
        class += alphas[g] * p_person[s];
        let overlap = w.overlap.eval(&boxes[s].to_corner(), &gt_box.to_corner());
        boxc += w.gamma1 * l1_box(&boxes[s], gt_box) + w.gamma2 * (1.0 - overlap);
    }
    w.beta1 * -class + w.beta2 * boxc
}

/// Matching cost of one prediction against one ground-truth instance,
/// together with the cheaper head correspondence.
pub fn pair_cost_oriented(
    pred: &PredictedInstance,
    gt: &MutualGazeInstance,
    w: &MatchWeights,
) -> (f64, Orientation) {
    let straight = oriented_cost(pred, gt, w, Orientation::Straight);
    let crossed = oriented_cost(pred, gt, w, Orientation::Crossed);
    if crossed < straight {
        (crossed, Orientation::Crossed)
    } else {
        (straight, Orientation::Straight)
    }
}

pub fn pair_cost(pred: &PredictedInstance, gt: &MutualGazeInstance, w: &MatchWeights) -> f64 {
    pair_cost_oriented(pred, gt, w).0
}

/// Cost of assigning a prediction to a padding slot.
pub const EMPTY_COST: f64 = 0.0;

/// Square cost matrix, rows = predictions, columns = ∅-padded ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub image_id: String,
    pub n: usize,
    /// Number of real (non-∅) columns; they come first.
    pub m: usize,
    values: Vec<f64>,
    orientations: Vec<Orientation>,
}

impl CostMatrix {
    /// Wraps a raw row-major square matrix whose columns are all real.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(MgtrError::InvalidCostMatrix(format!(
                "{} values do not form a {n}x{n} matrix",
                values.len()
            )));
        }
        Ok(CostMatrix {
            image_id: String::new(),
            n,
            m: n,
            orientations: vec![Orientation::Straight; n * n],
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    pub fn orientation(&self, row: usize, col: usize) -> Orientation {
        self.orientations[row * self.n + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn build_cost_matrix(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    w: &MatchWeights,
) -> Result<CostMatrix> {
    let n = preds.len();
    let m = gts.len();
    if m > n {
        return Err(MgtrError::TooManyInstances {
            image_id: gts.image_id.clone(),
            m,
            n,
        });
    }
    let mut values = vec![EMPTY_COST; n * n];
    let mut orientations = vec![Orientation::Straight; n * n];
    for (i, pred) in preds.predictions.iter().enumerate() {
        for (j, gt) in gts.instances.iter().enumerate() {
            let (c, o) = pair_cost_oriented(pred, gt, w);
            values[i * n + j] = c;
            orientations[i * n + j] = o;
        }
    }
    Ok(CostMatrix {
        image_id: gts.image_id.clone(),
        n,
        m,
        values,
        orientations,
    })
}

/// Optimal permutation for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub image_id: String,
    /// Prediction index → padded ground-truth column.
    pub sigma: Vec<usize>,
    pub total_cost: f64,
    /// Predictions mapped to real columns (equals M).
    pub matched_real: usize,
    /// Number of real columns the assignment was solved against.
    pub num_real: usize,
    /// Head correspondence per prediction; `None` for ∅ assignments.
    pub orientation: Vec<Option<Orientation>>,
}

impl MatchAssignment {
    /// Ground-truth index and orientation for prediction `i`, if real.
    pub fn target(&self, i: usize) -> Option<(usize, Orientation)> {
        let j = self.sigma[i];
        (j < self.num_real).then(|| (j, self.orientation[i].expect("real columns carry an orientation")))
    }
}

/// Minimum-cost perfect assignment on a square row-major matrix.
///
/// Returns the column chosen for each row and the optimal total.
pub fn solve_assignment(n: usize, cost: &[f64]) -> Result<(Vec<usize>, f64)> {
    if cost.len() != n * n {
        return Err(MgtrError::InvalidCostMatrix(format!("expected {} entries, got {}", n * n, cost.len())));
    }
    if let Some(k) = cost.iter().position(|v| !v.is_finite()) {
        return Err(MgtrError::InvalidCostMatrix(format!(
            "non-finite entry at ({}, {})",
            k / n,
            k % n
        )));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // Potentials u (rows) and v (columns), 1-based with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok((assignment, total))
}

pub fn hungarian_solve(c: &CostMatrix) -> Result<MatchAssignment> {
    let (sigma, total_cost) = if c.m == 0 {
        // Only ∅ columns: every permutation costs the same.
        if let Some(k) = c.values.iter().position(|v| !v.is_finite()) {
            return Err(MgtrError::InvalidCostMatrix(format!("non-finite entry at index {k}")));
        }
        ((0..c.n).collect(), c.n as f64 * EMPTY_COST)
    } else {
        solve_assignment(c.n, &c.values)?
    };
    let orientation = sigma
        .iter()
        .enumerate()
        .map(|(i, &j)| (j < c.m).then(|| c.orientation(i, j)))
        .collect::<Vec<_>>();
    let matched_real = orientation.iter().filter(|o| o.is_some()).count();
    Ok(MatchAssignment {
        image_id: c.image_id.clone(),
        sigma,
        total_cost,
        matched_real,
        num_real: c.m,
        orientation,
    })
}

/// Builds the cost matrix and solves it.
pub fn match_predictions(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    w: &MatchWeights,
) -> Result<MatchAssignment> {
    hungarian_solve(&build_cost_matrix(preds, gts, w)?)
}
