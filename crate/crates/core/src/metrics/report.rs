//! Frame records (JSON lines) and the aggregated metric report.
//!
//! Each line of a record file is one frame:
//!
//! ```json
//! {"frame": "000",
//!  "detections": [{"category": "car", "position": [x, y, z], "size": [w, l, h],
//!                  "yaw": 0.0, "velocity": [vx, vy], "score": 0.9}],
//!  "gt": [... same without "score" ...],
//!  "plan": {"waypoints": [[x, y], ...]},
//!  "gt_plan": {"waypoints": [[x, y], ...], "ego_size": [length, width],
//!              "obstacles": [[{"center": [x, y], "half_extents": [a, b], "yaw": 0.0}], ...]},
//!  "risk_gt": [{"view": 0, "bbox": [x1, y1, x2, y2], "risk_score": 0.8}],
//!  "risk_pred": [...]}
//! ```
//!
//! Every section is optional. Predictions and ground truth may live in the
//! same file or in two files joined on `frame`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::detection::{mean_ap, nds, nds_task_scores, tp_errors, Detection, DetectionFrame, ScaleErrorMode, MATCH_THRESHOLDS};
use super::planning::{ade, collision_rate, horizon_steps, BoxSequence, PLANNING_HZ};
use super::risk::{align_risk, diff_risk_dataset, DiffRiskMode, RiskBox};
use super::sat::OrientedRect;
use super::{MetricError, Result};
use crate::io::{self, IoError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub waypoints: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtPlan {
    pub waypoints: Vec<[f64; 2]>,
    /// Ego `[length, width]` in meters.
    pub ego_size: [f64; 2],
    /// Surrounding boxes at each future step.
    #[serde(default)]
    pub obstacles: Vec<Vec<OrientedRect>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<Vec<Detection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Plan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_plan: Option<GtPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_gt: Option<Vec<RiskBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_pred: Option<Vec<RiskBox>>,
}

impl FrameRecord {
    pub fn new(frame: impl Into<String>) -> Self {
        Self {
            frame: frame.into(),
            ..Self::default()
        }
    }

    /// Fills sections missing here from `other`.
    fn merge(&mut self, other: FrameRecord) {
        self.detections = self.detections.take().or(other.detections);
        self.gt = self.gt.take().or(other.gt);
        self.plan = self.plan.take().or(other.plan);
        self.gt_plan = self.gt_plan.take().or(other.gt_plan);
        self.risk_gt = self.risk_gt.take().or(other.risk_gt);
        self.risk_pred = self.risk_pred.take().or(other.risk_pred);
    }
}

pub fn parse_frames(text: &str, path: &Path) -> Result<Vec<FrameRecord>> {
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(line).map_err(|e| IoError::Format {
            what: "frame record",
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        frames.push(rec);
    }
    Ok(frames)
}

pub fn read_frames(path: &Path) -> Result<Vec<FrameRecord>> {
    let text = io::read_string(path)?;
    parse_frames(&text, path)
}

pub fn write_frames(path: &Path, frames: &[FrameRecord]) -> Result<()> {
    let mut out = String::new();
    for f in frames {
        out.push_str(&serde_json::to_string(f).expect("frame records serialize"));
        out.push('\n');
    }
    Ok(io::write_bytes(path, out.as_bytes())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub diff_risk: DiffRiskMode,
    pub scale_error: ScaleErrorMode,
    pub planning_hz: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            diff_risk: DiffRiskMode::Frobenius,
            scale_error: ScaleErrorMode::SizeIou,
            planning_hz: PLANNING_HZ,
        }
    }
}

/// Dataset-level metrics; `None` (JSON `null`) where a metric is undefined
/// for the given data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    #[serde(rename = "mATE")]
    pub mate: Option<f64>,
    #[serde(rename = "mASE")]
    pub mase: Option<f64>,
    #[serde(rename = "mAOE")]
    pub maoe: Option<f64>,
    #[serde(rename = "mAVE")]
    pub mave: Option<f64>,
    #[serde(rename = "NDS")]
    pub nds: Option<f64>,
    #[serde(rename = "ADE_1s")]
    pub ade_1s: Option<f64>,
    #[serde(rename = "ADE_2s")]
    pub ade_2s: Option<f64>,
    #[serde(rename = "ADE_3s")]
    pub ade_3s: Option<f64>,
    #[serde(rename = "Col_1s")]
    pub col_1s: Option<f64>,
    #[serde(rename = "Col_2s")]
    pub col_2s: Option<f64>,
    #[serde(rename = "Col_3s")]
    pub col_3s: Option<f64>,
    #[serde(rename = "Diff_Risk")]
    pub diff_risk: Option<f64>,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 13] = [
        "mAP", "mATE", "mASE", "mAOE", "mAVE", "NDS", "ADE_1s", "ADE_2s", "ADE_3s", "Col_1s", "Col_2s", "Col_3s",
        "Diff_Risk",
    ];
}

/// Joins prediction and ground-truth records on `frame`, in ground-truth
/// order. Prediction-only frames are ignored.
pub fn join_frames(pred: Vec<FrameRecord>, gt: Vec<FrameRecord>) -> Result<Vec<FrameRecord>> {
    let mut by_id: BTreeMap<String, FrameRecord> = BTreeMap::new();
    for p in pred {
        if by_id.contains_key(&p.frame) {
            return Err(MetricError::InvalidInput(format!("duplicate frame `{}` in predictions", p.frame)));
        }
        by_id.insert(p.frame.clone(), p);
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(gt.len());
    for mut g in gt {
        if !seen.insert(g.frame.clone()) {
            return Err(MetricError::InvalidInput(format!("duplicate frame `{}` in ground truth", g.frame)));
        }
        if let Some(p) = by_id.remove(&g.frame) {
            g.merge(p);
        }
        out.push(g);
    }
    if !by_id.is_empty() {
        log::warn!("{} prediction frame(s) have no ground truth and are ignored", by_id.len());
    }
    Ok(out)
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn undefined_ok<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::Undefined(why)) => {
            log::info!("{why}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Computes every report field over joined frames.
pub fn evaluate(frames: &[FrameRecord], opts: &EvalOptions) -> Result<MetricReport> {
    let mut report = MetricReport::default();

    let det: Vec<DetectionFrame> = frames
        .iter()
        .filter_map(|f| {
            f.gt.as_ref().map(|gt| DetectionFrame {
                pred: f.detections.clone().unwrap_or_default(),
                gt: gt.clone(),
            })
        })
        .collect();
    report.map = undefined_ok(mean_ap(&det, &MATCH_THRESHOLDS))?;
    let tp = undefined_ok(tp_errors(&det, &MATCH_THRESHOLDS, opts.scale_error))?;
    if let Some(e) = &tp {
        report.mate = Some(e.mate);
        report.mase = Some(e.mase);
        report.maoe = Some(e.maoe);
        report.mave = Some(e.mave);
    }
    report.nds = report.map.map(|m| nds(&nds_task_scores(m, tp.as_ref())));

    let horizons = [1.0, 2.0, 3.0].map(|s| horizon_steps(s, opts.planning_hz));
    let mut ades: [Vec<f64>; 3] = Default::default();
    let mut cols: [Vec<f64>; 3] = Default::default();
    for f in frames {
        let (Some(gt_plan), Some(plan)) = (&f.gt_plan, &f.plan) else {
            continue;
        };
        let seq = (!gt_plan.obstacles.is_empty()).then(|| {
            BoxSequence::from_plan(&plan.waypoints, gt_plan.ego_size[0], gt_plan.ego_size[1], gt_plan.obstacles.clone())
        });
        for (i, &h) in horizons.iter().enumerate() {
            if h > plan.waypoints.len() || h > gt_plan.waypoints.len() {
                continue;
            }
            ades[i].push(ade(&plan.waypoints[..h], &gt_plan.waypoints[..h], h)?);
            if let Some(seq) = &seq {
                let BoxSequence { ego, objects } = seq;
                if h <= objects.len() {
                    let cut = BoxSequence {
                        ego: ego[..h].to_vec(),
                        objects: objects[..h].to_vec(),
                    };
                    cols[i].push(collision_rate(&cut, h)?);
                }
            }
        }
    }
    [report.ade_1s, report.ade_2s, report.ade_3s] = [0, 1, 2].map(|i| mean(&ades[i]));
    [report.col_1s, report.col_2s, report.col_3s] = [0, 1, 2].map(|i| mean(&cols[i]));

    let mut pairs = Vec::new();
    for f in frames {
        if let Some(gt) = &f.risk_gt {
            let pred = f.risk_pred.as_deref().unwrap_or(&[]);
            pairs.push(align_risk(gt, pred)?);
        }
    }
    report.diff_risk = diff_risk_dataset(&pairs, opts.diff_risk);
    Ok(report)
}

/// Reads, joins and evaluates two record files.
pub fn evaluate_files(pred: &Path, gt: &Path, opts: &EvalOptions) -> Result<MetricReport> {
    let frames = join_frames(read_frames(pred)?, read_frames(gt)?)?;
    evaluate(&frames, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_frame() -> FrameRecord {
        let gt_det = Detection {
            category: "car".into(),
            position: [10.0, 0.0, 0.0],
            size: [2.0, 4.0, 1.5],
            yaw: 0.0,
            velocity: [1.0, 0.0],
            score: None,
        };
        let mut pred_det = gt_det.clone();
        pred_det.score = Some(0.9);
        pred_det.position[0] += 0.5;
        let wp: Vec<[f64; 2]> = (1..=6).map(|i| [2.0 * i as f64, 0.0]).collect();
        let shifted: Vec<[f64; 2]> = wp.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        let far = OrientedRect::new([0.0, 40.0], 4.0, 2.0, 0.0);
        FrameRecord {
            frame: "000".into(),
            detections: Some(vec![pred_det]),
            gt: Some(vec![gt_det]),
            plan: Some(Plan { waypoints: shifted }),
            gt_plan: Some(GtPlan {
                waypoints: wp,
                ego_size: [4.0, 2.0],
                obstacles: vec![vec![far]; 6],
            }),
            risk_gt: Some(vec![RiskBox { view: 0, bbox: [0.1, 0.1, 0.3, 0.3], risk_score: 0.6 }]),
            risk_pred: Some(vec![RiskBox { view: 0, bbox: [0.1, 0.1, 0.3, 0.3], risk_score: 0.3 }]),
        }
    }

    #[test]
    fn report_has_every_field() {
        let r = evaluate(&[sample_frame()], &EvalOptions::default()).unwrap();
        let v = serde_json::to_value(r).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), MetricReport::FIELDS.len());
        for k in MetricReport::FIELDS {
            assert!(obj[k].is_number(), "{k} is {:?}", obj[k]);
        }
        assert_eq!(r.ade_3s, Some(5.0));
        assert_eq!(r.col_3s, Some(0.0));
        assert!((r.mate.unwrap() - 0.5).abs() < 1e-12);
        assert!((r.diff_risk.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_sections_give_nulls() {
        let r = evaluate(&[FrameRecord::new("x")], &EvalOptions::default()).unwrap();
        assert_eq!(r, MetricReport::default());
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"Diff_Risk\":null"));
    }

    #[test]
    fn split_files_join_on_frame() {
        let full = sample_frame();
        let pred = FrameRecord {
            detections: full.detections.clone(),
            plan: full.plan.clone(),
            risk_pred: full.risk_pred.clone(),
            ..FrameRecord::new("000")
        };
        let gt = FrameRecord {
            gt: full.gt.clone(),
            gt_plan: full.gt_plan.clone(),
            risk_gt: full.risk_gt.clone(),
            ..FrameRecord::new("000")
        };
        let joined = join_frames(vec![pred, FrameRecord::new("orphan")], vec![gt]).unwrap();
        assert_eq!(joined, vec![full]);
        assert!(join_frames(vec![FrameRecord::new("a"), FrameRecord::new("a")], vec![]).is_err());
    }

    #[test]
    fn frames_roundtrip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let frames = vec![sample_frame(), FrameRecord::new("001")];
        write_frames(&path, &frames).unwrap();
        assert_eq!(read_frames(&path).unwrap(), frames);
    }

    #[test]
    fn bad_line_reports_line_number() {
        let err = parse_frames("{\"frame\":\"a\"}\n{oops}\n", Path::new("x.jsonl")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
