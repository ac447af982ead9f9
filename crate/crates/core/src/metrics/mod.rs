//! Evaluation suite: risk-score distance, detection metrics (mAP, TP errors,
//! NDS) and open-loop planning metrics (ADE, box collision rate).

use thiserror::Error;

use crate::io::IoError;

pub mod detection;
pub mod planning;
pub mod report;
pub mod risk;
pub mod sat;

pub use detection::{mean_ap, nds, tp_errors, Detection, DetectionFrame, ScaleErrorMode, TpErrors, MATCH_THRESHOLDS};
pub use planning::{ade, collision_rate, horizon_steps, BoxSequence, PLANNING_HZ};
pub use report::{evaluate, evaluate_files, join_frames, parse_frames, read_frames, write_frames, EvalOptions, FrameRecord, GtPlan, MetricReport, Plan};
pub use risk::{align_risk, box_iou, diff_risk, diff_risk_dataset, DiffRiskMode, RiskBox, RiskVectorPair};
pub use sat::{intersects, separation, OrientedRect};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("invalid metric input: {0}")]
    InvalidInput(String),
    #[error("degenerate box {0}")]
    DegenerateBox(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, MetricError>;
