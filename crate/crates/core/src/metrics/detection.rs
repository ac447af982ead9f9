//! Detection metrics: center-distance mAP, true-positive errors and NDS.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{MetricError, Result};

/// Center-distance thresholds (meters) averaged over.
pub const MATCH_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Number of recall levels of the interpolated precision curve.
pub const RECALL_LEVELS: usize = 101;

/// A 3D box. `score` is present only on predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: String,
    /// `[x, y, z]` meters.
    pub position: [f64; 3],
    /// `[w, l, h]` meters.
    pub size: [f64; 3],
    pub yaw: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Detection {
    fn center_distance(&self, other: &Detection) -> f64 {
        (self.position[0] - other.position[0]).hypot(self.position[1] - other.position[1])
    }

    fn validate(&self, is_pred: bool) -> Result<()> {
        if !self.size.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(MetricError::InvalidInput(format!(
                "{} box has non-positive size {:?}",
                self.category, self.size
            )));
        }
        match (is_pred, self.score) {
            (true, Some(s)) if (0.0..=1.0).contains(&s) => Ok(()),
            (true, s) => Err(MetricError::InvalidInput(format!(
                "prediction score must be in [0, 1], got {s:?}"
            ))),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(MetricError::InvalidInput("ground-truth box carries a score".into())),
        }
    }
}

/// Predictions and ground truth of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionFrame {
    pub pred: Vec<Detection>,
    pub gt: Vec<Detection>,
}

fn validate(frames: &[DetectionFrame]) -> Result<()> {
    for f in frames {
        f.pred.iter().try_for_each(|d| d.validate(true))?;
        f.gt.iter().try_for_each(|d| d.validate(false))?;
    }
    Ok(())
}

/// A matched (prediction, ground truth) pair, by frame-local indices.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Match {
    frame: usize,
    pred: usize,
    gt: usize,
}

/// Greedy matching of one category at one threshold. Returns the TP flag of
/// every prediction in descending-score order and the matched pairs.
fn match_category(frames: &[DetectionFrame], category: &str, threshold: f64) -> (Vec<bool>, Vec<Match>) {
    let mut preds: Vec<(usize, usize, f64)> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        for (pi, p) in f.pred.iter().enumerate() {
            if p.category == category {
                preds.push((fi, pi, p.score.unwrap_or(0.0)));
            }
        }
    }
    preds.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gt.len()]).collect();
    let mut flags = Vec::with_capacity(preds.len());
    let mut matches = Vec::new();
    for (fi, pi, _) in preds {
        let p = &frames[fi].pred[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in frames[fi].gt.iter().enumerate() {
            if taken[fi][gi] || g.category != category {
                continue;
            }
            let d = p.center_distance(g);
            if d < threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((gi, d));
            }
        }
        if let Some((gi, _)) = best {
            taken[fi][gi] = true;
            matches.push(Match { frame: fi, pred: pi, gt: gi });
        }
        flags.push(best.is_some());
    }
    (flags, matches)
}

/// Interpolated average precision: mean over recall levels `r = 0, 0.01 .. 1`
/// of the maximum precision attained at recall `>= r`.
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += usize::from(hit);
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // suffix maximum of precision
    let mut best = 0.0f64;
    for point in curve.iter_mut().rev() {
        best = best.max(point.1);
        point.1 = best;
    }
    let mut total = 0.0;
    let mut k = 0;
    for level in 0..RECALL_LEVELS {
        let r = level as f64 / (RECALL_LEVELS - 1) as f64;
        while k < curve.len() && curve[k].0 < r - 1e-12 {
            k += 1;
        }
        if k < curve.len() {
            total += curve[k].1;
        }
    }
    total / RECALL_LEVELS as f64
}

fn gt_categories(frames: &[DetectionFrame]) -> BTreeSet<&str> {
    frames
        .iter()
        .flat_map(|f| f.gt.iter().map(|g| g.category.as_str()))
        .collect()
}

/// mAP over the ground-truth categories, each averaged over `thresholds`.
pub fn mean_ap(frames: &[DetectionFrame], thresholds: &[f64]) -> Result<f64> {
    validate(frames)?;
    let categories = gt_categories(frames);
    if categories.is_empty() {
        return Err(MetricError::Undefined("no ground-truth boxes".into()));
    }
    if thresholds.is_empty() {
        return Err(MetricError::InvalidInput("no matching thresholds".into()));
    }
    let mut sum = 0.0;
    for cat in &categories {
        let n_gt = frames
            .iter()
            .map(|f| f.gt.iter().filter(|g| g.category == *cat).count())
            .sum();
        let ap: f64 = thresholds
            .iter()
            .map(|&t| average_precision(&match_category(frames, cat, t).0, n_gt))
            .sum();
        sum += ap / thresholds.len() as f64;
    }
    Ok(sum / categories.len() as f64)
}

/// How the scale error is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleErrorMode {
    /// `1 - IoU` of the two boxes after aligning centers and headings.
    #[default]
    SizeIou,
    /// Absolute 3D position error of the matched pair.
    Position,
}

/// Mean errors of matched true positives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
}

fn aligned_iou(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let vol = |s: &[f64; 3]| s.iter().product::<f64>();
    inter / (vol(a) + vol(b) - inter)
}

/// Smallest absolute angle between two headings, in `[0, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        2.0 * PI - d
    } else {
        d
    }
}

/// TP errors: for every threshold the errors of all matched pairs (pooled over
/// categories) are averaged; the result is the mean over thresholds with at
/// least one match.
pub fn tp_errors(frames: &[DetectionFrame], thresholds: &[f64], scale: ScaleErrorMode) -> Result<TpErrors> {
    validate(frames)?;
    let categories = gt_categories(frames);
    let mut per_threshold = Vec::new();
    for &t in thresholds {
        let mut acc = [0.0; 4];
        let mut n = 0usize;
        for cat in &categories {
            for m in match_category(frames, cat, t).1 {
                let p = &frames[m.frame].pred[m.pred];
                let g = &frames[m.frame].gt[m.gt];
                acc[0] += p.center_distance(g);
                acc[1] += match scale {
                    ScaleErrorMode::SizeIou => 1.0 - aligned_iou(&p.size, &g.size),
                    ScaleErrorMode::Position => (0..3).map(|i| (p.position[i] - g.position[i]).powi(2)).sum::<f64>().sqrt(),
                };
                acc[2] += angle_diff(p.yaw, g.yaw);
                acc[3] += (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1]);
                n += 1;
            }
        }
        if n > 0 {
            per_threshold.push(acc.map(|a| a / n as f64));
        }
    }
    if per_threshold.is_empty() {
        return Err(MetricError::Undefined("no true-positive matches".into()));
    }
    let k = per_threshold.len() as f64;
    let mean = |i: usize| per_threshold.iter().map(|e| e[i]).sum::<f64>() / k;
    Ok(TpErrors {
        mate: mean(0),
        mase: mean(1),
        maoe: mean(2),
        mave: mean(3),
    })
}

/// Discounted mean `(1/M) sum_m s_m / log2(m + 1)`.
pub fn nds(task_scores: &[f64]) -> f64 {
    if task_scores.is_empty() {
        return 0.0;
    }
    let total: f64 = task_scores
        .iter()
        .enumerate()
        .map(|(i, s)| s / ((i + 2) as f64).log2())
        .sum();
    total / task_scores.len() as f64
}

/// `[mAP, 1 - min(1, mATE), 1 - min(1, mASE), 1 - min(1, mAOE), 1 - min(1, mAVE)]`.
/// Missing TP errors count as the worst error.
pub fn nds_task_scores(map: f64, tp: Option<&TpErrors>) -> Vec<f64> {
    let errs = tp.map_or([1.0; 4], |e| [e.mate, e.mase, e.maoe, e.mave]);
    std::iter::once(map).chain(errs.iter().map(|e| 1.0 - e.min(1.0))).collect()
}
