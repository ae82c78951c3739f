//! Optimal one-to-one assignment of predictions to ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou_loss, BBox, BinaryMask};
use crate::losses::LossWeights;

/// Bipartite assignment between `P` predictions and `G` ground-truth instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction, ground_truth)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
}

impl MatchResult {
    pub fn matched_prediction(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == pred).map(|(_, g)| *g)
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost[p][g]).sum()
    }
}

/// Relative weight of each cost family; the per-term lambdas come from [`LossWeights`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchWeights {
    pub class: f64,
    pub boxes: f64,
    pub mask: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            class: 2.0,
            boxes: 1.0,
            mask: 1.0,
        }
    }
}

impl MatchWeights {
    pub fn from_loss(w: &LossWeights) -> Self {
        MatchWeights {
            class: w.class,
            ..MatchWeights::default()
        }
    }
}

/// Detached view of one prediction for cost evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PredView<'a> {
    /// Per-class probabilities; for encoder tokens a single foreground probability.
    pub class_probs: &'a [f32],
    pub bbox: BBox,
    /// Soft mask at the ground-truth mask resolution.
    pub mask: &'a [f32],
}

#[derive(Debug, Clone, Copy)]
pub struct GtView<'a> {
    /// Index into `PredView::class_probs`.
    pub class_index: usize,
    pub bbox: BBox,
    pub mask: &'a BinaryMask,
}

const EPS: f64 = 1e-8;

pub fn mask_bce(pred: &[f32], gt: &BinaryMask) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let p = (p as f64).clamp(EPS, 1.0 - EPS);
            if g != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

pub fn mask_dice(pred: &[f32], gt: &BinaryMask) -> f64 {
    let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt.data()) {
        let (p, g) = (p as f64, g as f64);
        inter += p * g;
        ps += p;
        gs += g;
    }
    1.0 - (2.0 * inter + 1.0) / (ps + gs + 1.0)
}

pub fn box_l1(a: &BBox, b: &BBox) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / 4.0
}

pub fn match_cost(pred: &PredView, gt: &GtView, lw: &LossWeights, mw: &MatchWeights) -> f64 {
    let score = pred.class_probs[gt.class_index] as f64;
    let boxes = lw.l1 * box_l1(&pred.bbox, &gt.bbox) + lw.giou * giou_loss(&pred.bbox, &gt.bbox);
    let mask = lw.mask_ce * mask_bce(pred.mask, gt.mask) + lw.mask_dice * mask_dice(pred.mask, gt.mask);
    mw.class * (-score) + mw.boxes * boxes + mw.mask * mask
}

pub fn cost_matrix(preds: &[PredView], gts: &[GtView], lw: &LossWeights, mw: &MatchWeights) -> Vec<Vec<f64>> {
    preds
        .iter()
        .map(|p| gts.iter().map(|g| match_cost(p, g, lw, mw)).collect())
        .collect()
}

/// Minimum-cost injective assignment over a `P x G` matrix (Hungarian method).
///
/// `|pairs| == min(P, G)`. The solver runs on the side with fewer entries as rows,
/// which is equivalent to padding the other side with zero-cost dummies.
pub fn assign(cost: &[Vec<f64>], num_gt: usize) -> Result<MatchResult> {
    let p = cost.len();
    if cost.iter().any(|row| row.len() != num_gt) {
        return Err(Error::Shape("cost matrix rows must all have G entries".into()));
    }
    if let Some((i, j)) = cost
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| (i, j, *v)))
        .find(|(_, _, v)| !v.is_finite())
        .map(|(i, j, _)| (i, j))
    {
        return Err(Error::Input(format!("non-finite cost at ({i}, {j})")));
    }
    let mut pairs = if num_gt == 0 || p == 0 {
        Vec::new()
    } else if num_gt <= p {
        // rows = ground truth, columns = predictions
        let t: Vec<Vec<f64>> = (0..num_gt).map(|g| (0..p).map(|i| cost[i][g]).collect()).collect();
        hungarian(&t)
            .into_iter()
            .enumerate()
            .map(|(g, i)| (i, g))
            .collect()
    } else {
        hungarian(cost).into_iter().enumerate().collect::<Vec<_>>()
    };
    pairs.sort_unstable();
    let mut used = vec![false; p];
    for &(i, _) in &pairs {
        used[i] = true;
    }
    let unmatched_predictions = (0..p).filter(|&i| !used[i]).collect();
    Ok(MatchResult {
        pairs,
        unmatched_predictions,
    })
}

/// Rectangular Hungarian with potentials; `rows <= cols`. Returns the column of each row.
fn hungarian(a: &[Vec<f64>]) -> Vec<usize> {
    let n = a.len();
    let m = a[0].len();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // owner[j] = row assigned to column j (1-based, 0 = none)
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}
