//! Oriented rectangle overlap by the separating axis theorem.

use serde::{Deserialize, Serialize};

use super::MetricError;

/// Ground-plane box: center, half extents along (heading, lateral), yaw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub center: [f64; 2],
    pub half_extents: [f64; 2],
    pub yaw: f64,
}

impl OrientedRect {
    /// From full length (along the heading) and width.
    pub fn new(center: [f64; 2], length: f64, width: f64, yaw: f64) -> Self {
        Self {
            center,
            half_extents: [length / 2.0, width / 2.0],
            yaw,
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let ok = self.half_extents.iter().all(|h| h.is_finite() && *h > 0.0)
            && self.center.iter().all(|c| c.is_finite())
            && self.yaw.is_finite();
        if ok {
            Ok(())
        } else {
            Err(MetricError::DegenerateBox(format!("{self:?}")))
        }
    }

    /// Unit heading and lateral directions.
    pub fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.yaw.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let [u, v] = self.axes();
        let [a, b] = self.half_extents;
        let [cx, cy] = self.center;
        let at = |su: f64, sv: f64| [cx + su * a * u[0] + sv * b * v[0], cy + su * a * u[1] + sv * b * v[1]];
        [at(1.0, 1.0), at(-1.0, 1.0), at(-1.0, -1.0), at(1.0, -1.0)]
    }

    fn project(&self, axis: [f64; 2]) -> (f64, f64) {
        let center = self.center[0] * axis[0] + self.center[1] * axis[1];
        let [u, v] = self.axes();
        let radius = self.half_extents[0] * (u[0] * axis[0] + u[1] * axis[1]).abs()
            + self.half_extents[1] * (v[0] * axis[0] + v[1] * axis[1]).abs();
        (center - radius, center + radius)
    }
}

/// Largest gap between the projections over the four candidate axes.
/// Positive: separated by at least that much along some axis; non-positive:
/// every axis overlaps.
pub fn separation(a: &OrientedRect, b: &OrientedRect) -> f64 {
    let mut gap = f64::NEG_INFINITY;
    for axis in a.axes().into_iter().chain(b.axes()) {
        let (a0, a1) = a.project(axis);
        let (b0, b1) = b.project(axis);
        gap = gap.max((b0 - a1).max(a0 - b1));
    }
    gap
}

/// Closed-set intersection test; touching boxes intersect.
pub fn intersects(a: &OrientedRect, b: &OrientedRect) -> bool {
    separation(a, b) <= 0.0
}
