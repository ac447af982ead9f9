//! Normalized distance between ground-truth and predicted risk scores.

use serde::{Deserialize, Serialize};

use super::{MetricError, Result};

/// IoU a predicted box needs to be aligned with a ground-truth box.
pub const RISK_MATCH_IOU: f64 = 0.5;

/// A risk-annotated 2D box in one camera view; `bbox` is `[x1, y1, x2, y2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskBox {
    pub view: usize,
    pub bbox: [f64; 4],
    pub risk_score: f64,
}

/// Aligned score vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RiskVectorPair {
    pub r_gt: Vec<f64>,
    pub r_pred: Vec<f64>,
}

impl RiskVectorPair {
    pub fn new(r_gt: Vec<f64>, r_pred: Vec<f64>) -> Result<Self> {
        if r_gt.len() != r_pred.len() {
            return Err(MetricError::InvalidInput(format!(
                "risk vectors differ in length: {} vs {}",
                r_gt.len(),
                r_pred.len()
            )));
        }
        if let Some(v) = r_gt.iter().chain(&r_pred).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MetricError::InvalidInput(format!("risk score {v} outside [0, 1]")));
        }
        Ok(Self { r_gt, r_pred })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffRiskMode {
    /// `||gt - pred||_2 / ||gt||_2`
    #[default]
    Frobenius,
    /// `sum |gt - pred| / sum |gt|`
    Elementwise,
}

pub fn diff_risk(pair: &RiskVectorPair, mode: DiffRiskMode) -> Result<f64> {
    let diffs = pair.r_gt.iter().zip(&pair.r_pred).map(|(g, p)| g - p);
    let (num, den) = match mode {
        DiffRiskMode::Frobenius => (
            diffs.map(|d| d * d).sum::<f64>().sqrt(),
            pair.r_gt.iter().map(|g| g * g).sum::<f64>().sqrt(),
        ),
        DiffRiskMode::Elementwise => (
            diffs.map(f64::abs).sum::<f64>(),
            pair.r_gt.iter().map(|g| g.abs()).sum::<f64>(),
        ),
    };
    if den == 0.0 {
        return Err(MetricError::Undefined("ground-truth risk vector has zero norm".into()));
    }
    Ok(num / den)
}

/// Mean over frames. Frames whose ground truth has zero norm are skipped;
/// `None` when no frame is defined.
pub fn diff_risk_dataset(pairs: &[RiskVectorPair], mode: DiffRiskMode) -> Option<f64> {
    let values: Vec<f64> = pairs.iter().filter_map(|p| diff_risk(p, mode).ok()).collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Aligns annotations into score vectors. Predictions are visited by
/// descending score and take the unmatched same-view ground-truth box of
/// highest IoU (at least [`RISK_MATCH_IOU`]). Order of the result: matched
/// pairs, then missed ground truth (paired with 0), then unmatched
/// predictions (paired with 0 on the ground-truth side).
pub fn align_risk(gt: &[RiskBox], pred: &[RiskBox]) -> Result<RiskVectorPair> {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].risk_score.total_cmp(&pred[a].risk_score));
    let mut gt_used = vec![false; gt.len()];
    let mut r_gt = Vec::new();
    let mut r_pred = Vec::new();
    let mut lone_pred = Vec::new();
    for &p in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gbox) in gt.iter().enumerate() {
            if gt_used[g] || gbox.view != pred[p].view {
                continue;
            }
            let iou = box_iou(&gbox.bbox, &pred[p].bbox);
            if iou >= RISK_MATCH_IOU && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                gt_used[g] = true;
                r_gt.push(gt[g].risk_score);
                r_pred.push(pred[p].risk_score);
            }
            None => lone_pred.push(pred[p].risk_score),
        }
    }
    for (g, used) in gt_used.iter().enumerate() {
        if !used {
            r_gt.push(gt[g].risk_score);
            r_pred.push(0.0);
        }
    }
    for s in lone_pred {
        r_gt.push(0.0);
        r_pred.push(s);
    }
    RiskVectorPair::new(r_gt, r_pred)
}
