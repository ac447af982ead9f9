//! Open-loop planning metrics: displacement error and box collision rate.

use super::sat::{intersects, OrientedRect};
use super::{MetricError, Result};

/// Planner output cadence (waypoints per second).
pub const PLANNING_HZ: f64 = 2.0;

/// Steps covering `seconds` at the given cadence.
pub fn horizon_steps(seconds: f64, hz: f64) -> usize {
    (seconds * hz).round() as usize
}

/// Mean Euclidean distance over the first `horizon` waypoints.
pub fn ade(pred: &[[f64; 2]], gt: &[[f64; 2]], horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(MetricError::InvalidInput("ADE horizon must be at least one step".into()));
    }
    if pred.len() != gt.len() {
        return Err(MetricError::InvalidInput(format!(
            "trajectory lengths differ: predicted {}, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if horizon > pred.len() {
        return Err(MetricError::InvalidInput(format!(
            "horizon {horizon} exceeds trajectory length {}",
            pred.len()
        )));
    }
    let total: f64 = pred[..horizon]
        .iter()
        .zip(&gt[..horizon])
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum();
    Ok(total / horizon as f64)
}

/// Ego and surrounding-object boxes per future step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoxSequence {
    pub ego: Vec<OrientedRect>,
    /// Objects present at each step (may differ in count between steps).
    pub objects: Vec<Vec<OrientedRect>>,
}

impl BoxSequence {
    /// Ego boxes placed on `waypoints`, heading along the direction of travel
    /// (starting from the origin). A stationary step keeps the last heading.
    pub fn from_plan(waypoints: &[[f64; 2]], ego_length: f64, ego_width: f64, objects: Vec<Vec<OrientedRect>>) -> Self {
        let mut prev = [0.0, 0.0];
        let mut yaw = 0.0;
        let ego = waypoints
            .iter()
            .map(|w| {
                let (dx, dy) = (w[0] - prev[0], w[1] - prev[1]);
                if dx.hypot(dy) > 1e-9 {
                    yaw = dy.atan2(dx);
                }
                prev = *w;
                OrientedRect::new(*w, ego_length, ego_width, yaw)
            })
            .collect();
        Self { ego, objects }
    }
}

/// Fraction of the first `horizon` steps where the ego box overlaps any object.
pub fn collision_rate(seq: &BoxSequence, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(MetricError::InvalidInput("collision horizon must be at least one step".into()));
    }
    if seq.ego.len() != seq.objects.len() {
        return Err(MetricError::InvalidInput(format!(
            "{} ego steps but {} object steps",
            seq.ego.len(),
            seq.objects.len()
        )));
    }
    if horizon > seq.ego.len() {
        return Err(MetricError::InvalidInput(format!(
            "horizon {horizon} exceeds sequence length {}",
            seq.ego.len()
        )));
    }
    let mut hits = 0usize;
    for (ego, objects) in seq.ego[..horizon].iter().zip(&seq.objects[..horizon]) {
        ego.validate()?;
        let mut hit = false;
        for obj in objects {
            obj.validate()?;
            hit |= intersects(ego, obj);
        }
        hits += usize::from(hit);
    }
    Ok(hits as f64 / horizon as f64)
}
