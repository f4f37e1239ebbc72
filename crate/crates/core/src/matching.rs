//! Optimal assignment and the matching rules that turn ground truth into
//! per-query supervision targets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::dice_on_probs;

/// Rectangular matrix of finite matching costs (rows = predictions).
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("CostMatrix::new", (rows, cols), (data.len(), 1)));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i, value: data[i] });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum-cost matching of `min(rows, cols)` pairs (shortest augmenting
/// paths with potentials, O(n²m)).
pub fn hungarian(cost: &CostMatrix) -> Matching {
    let transposed = cost.rows > cost.cols;
    let (n, m) = if transposed {
        (cost.cols, cost.rows)
    } else {
        (cost.rows, cost.cols)
    };
    if n == 0 {
        return Matching { pairs: Vec::new(), cost: 0.0 };
    }
    let c = |i: usize, j: usize| if transposed { cost.get(j, i) } else { cost.get(i, j) };

    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| {
            let (i, j) = (p[j] - 1, j - 1);
            if transposed {
                (j, i)
            } else {
                (i, j)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
    Matching { pairs, cost: total }
}

/// Persistent track → ground-truth pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: BTreeMap<u32, u32>,
}

/// Outcome of historical matching at one frame.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMatch {
    /// Track/gt pairs carried over; the gt is present this frame.
    pub kept: Vec<(u32, u32)>,
    /// Tracks whose gt is absent this frame; supervised toward background.
    pub vanished: Vec<(u32, u32)>,
    /// Active tracks without any history pair.
    pub unmatched: Vec<u32>,
    /// Present gt ids not claimed by any track.
    pub residual: Vec<u32>,
}

/// Keeps history pairs whose gt is still present and returns the residual pool.
///
/// `active` lists the active track ids; `present` the gt ids visible this frame.
/// Vanished pairs are removed from the returned assignment.
pub fn historical_match(
    active: &[u32],
    present: &[u32],
    prior: &Assignment,
) -> Result<(Assignment, FrameMatch)> {
    let active_set: BTreeSet<u32> = active.iter().copied().collect();
    if let Some(t) = prior.pairs.keys().find(|t| !active_set.contains(t)) {
        return Err(Error::InternalState(format!(
            "assignment references track {t}, which is not active"
        )));
    }
    let present_set: BTreeSet<u32> = present.iter().copied().collect();
    let mut next = Assignment::default();
    let mut fm = FrameMatch::default();
    let mut claimed = BTreeSet::new();
    for &t in active {
        match prior.pairs.get(&t) {
            Some(&g) if present_set.contains(&g) && claimed.insert(g) => {
                next.pairs.insert(t, g);
                fm.kept.push((t, g));
            }
            Some(&g) => fm.vanished.push((t, g)),
            None => fm.unmatched.push(t),
        }
    }
    fm.residual = present.iter().copied().filter(|g| !claimed.contains(g)).collect();
    Ok((next, fm))
}

/// A ground-truth object available for anchor assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTarget {
    pub id: u32,
    pub class_id: usize,
    pub mask: Vec<f64>,
}

/// Weights of the class and mask terms in matching costs and the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_dice: f64,
    pub lambda_bce: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_dice: 5.0,
            lambda_bce: 5.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_cls, self.lambda_dice, self.lambda_bce];
        if l.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || l.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("loss weights must be >= 0 with at least one > 0".into()));
        }
        Ok(())
    }
}

/// Negative log softmax probability of `class` under `logits`.
pub fn class_nll(logits: &[f64], class: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[class]
}

/// IoU of two masks binarized at 0.5.
pub fn mask_iou(a: &[f64], b: &[f64]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Matching cost of a predicted (mask probabilities, class logits) against a gt.
pub fn pair_cost(mask: &[f64], logits: &[f64], gt: &GtTarget, w: &LossConfig) -> f64 {
    w.lambda_dice * dice_on_probs(mask, &gt.mask) + w.lambda_cls * class_nll(logits, gt.class_id)
}

/// Assigns residual gt to anchors through their candidates.
///
/// `candidates[a]` is the `(mask, class_logits)` of the segmenter query anchor
/// `a` was built from. Pairs whose candidate mask overlaps the gt mask with IoU
/// below `min_iou` are never matched. Returns the gt index per anchor.
pub fn assign_daq(
    residual: &[GtTarget],
    candidates: &[(&[f64], &[f64])],
    w: &LossConfig,
    min_iou: f64,
) -> Result<Vec<Option<usize>>> {
    const BLOCKED: f64 = 1e6;
    let cm = CostMatrix::from_fn(candidates.len(), residual.len(), |a, g| {
        let (mask, logits) = candidates[a];
        if mask_iou(mask, &residual[g].mask) < min_iou {
            BLOCKED
        } else {
            pair_cost(mask, logits, &residual[g], w)
        }
    })?;
    let mut out = vec![None; candidates.len()];
    for (a, g) in hungarian(&cm).pairs {
        if cm.get(a, g) < BLOCKED {
            out[a] = Some(g);
        }
    }
    Ok(out)
}
