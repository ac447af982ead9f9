//! Deterministic synthetic scenes with exact ground truth.
//!
//! Objects are scattered around the ego vehicle; each object's risk is the
//! clamped inverse distance `min(1, RISK_DISTANCE / dist)` to the ego origin.
//! The BEV queries handed to the pipeline carry that risk field in channel 0,
//! a footprint occupancy in channel 1 and small noise elsewhere, so the risk
//! head has something spatially meaningful to attend to.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector4;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::Result;
use crate::geometry::{Camera, CameraRig, DEFAULT_DEPTH_EPS};
use crate::io::{self, TensorBundle};
use crate::metrics::{Detection, FrameRecord, GtPlan, OrientedRect, Plan, RiskBox};

/// Distance (m) at which the synthetic risk saturates at 1.
pub const RISK_DISTANCE: f64 = 5.0;
/// Height of the ground plane in the lidar frame.
pub const GROUND_Z: f64 = -1.8;
pub const IMAGE_WIDTH: u32 = 1600;
pub const IMAGE_HEIGHT: u32 = 900;
pub const FOCAL: f64 = 1000.0;
pub const EGO_SIZE: [f64; 2] = [4.5, 1.9];
pub const FRAME_ID: &str = "000000";

/// Camera names for the six-camera ring, counter-clockwise from the front.
const RING_NAMES: [&str; 6] = [
    "CAM_FRONT",
    "CAM_FRONT_LEFT",
    "CAM_BACK_LEFT",
    "CAM_BACK",
    "CAM_BACK_RIGHT",
    "CAM_FRONT_RIGHT",
];

pub fn synthetic_risk(position: [f64; 3]) -> f64 {
    let dist = position[0].hypot(position[1]);
    if dist <= RISK_DISTANCE {
        1.0
    } else {
        RISK_DISTANCE / dist
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: String,
    /// Box center, lidar frame.
    pub position: [f64; 3],
    /// `[w, l, h]`
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub risk_score: f64,
}

impl SceneObject {
    /// Ground footprint at `t` seconds, moving at constant velocity.
    pub fn footprint(&self, t: f64) -> OrientedRect {
        OrientedRect::new(
            [self.position[0] + self.velocity[0] * t, self.position[1] + self.velocity[1] * t],
            self.size[1],
            self.size[0],
            self.yaw,
        )
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let fp = self.footprint(0.0).corners();
        let (z0, z1) = (self.position[2] - self.size[2] / 2.0, self.position[2] + self.size[2] / 2.0);
        std::array::from_fn(|i| {
            let c = fp[i % 4];
            [c[0], c[1], if i < 4 { z0 } else { z1 }]
        })
    }

    fn detection(&self) -> Detection {
        Detection {
            category: self.category.clone(),
            position: self.position,
            size: self.size,
            yaw: self.yaw,
            velocity: self.velocity,
            score: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub rig: CameraRig,
    pub objects: Vec<SceneObject>,
    pub ego_size: [f64; 2],
    /// Ground-truth future ego positions at the planning cadence.
    pub ego_plan: Vec<[f64; 2]>,
    pub planning_hz: f64,
}

/// Ring of `n` pinhole cameras at `360 / n` degree yaw spacing.
pub fn camera_ring(n: usize) -> CameraRig {
    let cameras = (0..n)
        .map(|k| {
            let yaw = 2.0 * PI * k as f64 / n as f64;
            let name = if n == RING_NAMES.len() {
                RING_NAMES[k].to_string()
            } else {
                format!("CAM_{k}")
            };
            let position = [0.5 * yaw.cos(), 0.5 * yaw.sin(), 0.0];
            Camera::pinhole(&name, IMAGE_WIDTH, IMAGE_HEIGHT, FOCAL, yaw, position)
        })
        .collect();
    CameraRig { cameras }
}

/// `(category, [w, l, h], max speed)`
const CATEGORIES: [(&str, [f64; 3], f64); 4] = [
    ("car", [1.9, 4.5, 1.6], 6.0),
    ("pedestrian", [0.7, 0.7, 1.75], 1.5),
    ("bus", [2.8, 11.0, 3.2], 5.0),
    ("bicycle", [0.7, 1.8, 1.5], 3.0),
];

pub fn gen_scene(seed: u64, n_objects: usize, cfg: &RunConfig) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = camera_ring(cfg.model.pv_views);
    let objects = (0..n_objects)
        .map(|_| {
            // cars twice as likely as the other classes
            let (category, size, vmax) = CATEGORIES[[0, 0, 1, 2, 3][rng.random_range(0..5)]];
            let dist = rng.random_range(6.0..45.0);
            let bearing = rng.random_range(0.0..2.0 * PI);
            let yaw = rng.random_range(-PI..PI);
            let speed = rng.random_range(0.0..vmax);
            let position = [dist * bearing.cos(), dist * bearing.sin(), GROUND_Z + size[2] / 2.0];
            SceneObject {
                category: category.to_string(),
                position,
                size,
                yaw,
                velocity: [speed * yaw.cos(), speed * yaw.sin()],
                risk_score: synthetic_risk(position),
            }
        })
        .collect();
    let hz = cfg.eval.planning_hz;
    let curvature = rng.random_range(-0.05..0.05);
    let step = 5.0 / hz;
    let mut heading: f64 = 0.0;
    let mut at = [0.0, 0.0];
    let ego_plan = (0..6)
        .map(|_| {
            heading += curvature * step;
            at = [at[0] + step * heading.cos(), at[1] + step * heading.sin()];
            at
        })
        .collect();
    SyntheticScene {
        seed,
        rig,
        objects,
        ego_size: EGO_SIZE,
        ego_plan,
        planning_hz: hz,
    }
}

/// Image-space boxes of every object in every camera, normalized to `[0, 1]`.
/// Objects with a corner behind a camera are skipped for that camera.
pub fn risk_ground_truth(scene: &SyntheticScene) -> Vec<RiskBox> {
    let mut out = Vec::new();
    for (view, cam) in scene.rig.cameras.iter().enumerate() {
        for obj in &scene.objects {
            let mut bbox = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
            let mut in_front = true;
            for c in obj.corners() {
                let p = cam.project(&Vector4::new(c[0], c[1], c[2], 1.0), DEFAULT_DEPTH_EPS);
                if p.depth <= DEFAULT_DEPTH_EPS {
                    in_front = false;
                    break;
                }
                bbox = [bbox[0].min(p.x_norm), bbox[1].min(p.y_norm), bbox[2].max(p.x_norm), bbox[3].max(p.y_norm)];
            }
            if !in_front {
                continue;
            }
            let bbox = bbox.map(|v| v.clamp(0.0, 1.0));
            if bbox[2] > bbox[0] && bbox[3] > bbox[1] {
                out.push(RiskBox {
                    view,
                    bbox,
                    risk_score: obj.risk_score,
                });
            }
        }
    }
    out
}

/// BEV query features `[1, rows * cols, dim]`.
pub fn bev_queries(scene: &SyntheticScene, cfg: &RunConfig) -> Array3<f64> {
    let grid = &cfg.grid;
    let r = grid.range;
    let dim = cfg.model.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x5eed_0be0);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let n = grid.rows * grid.cols;
    let mut out = Array3::zeros((1, n, dim));
    let footprints: Vec<OrientedRect> = scene.objects.iter().map(|o| o.footprint(0.0)).collect();
    for q in 0..n {
        let (row, col) = (q / grid.cols, q % grid.cols);
        let x = r.x_min + (col as f64 + 0.5) / grid.cols as f64 * (r.x_max - r.x_min);
        let y = r.y_min + (row as f64 + 0.5) / grid.rows as f64 * (r.y_max - r.y_min);
        let mut risk: f64 = 0.0;
        let mut occupied = false;
        for (obj, fp) in scene.objects.iter().zip(&footprints) {
            let sigma = 0.5 * obj.size[0].max(obj.size[1]) + 1.0;
            let d2 = (x - obj.position[0]).powi(2) + (y - obj.position[1]).powi(2);
            risk = risk.max(obj.risk_score * (-d2 / (2.0 * sigma * sigma)).exp());
            let [u, v] = fp.axes();
            let (dx, dy) = (x - fp.center[0], y - fp.center[1]);
            occupied |= (dx * u[0] + dy * u[1]).abs() <= fp.half_extents[0]
                && (dx * v[0] + dy * v[1]).abs() <= fp.half_extents[1];
        }
        out[[0, q, 0]] = risk;
        out[[0, q, 1]] = if occupied { 1.0 } else { 0.0 };
        for c in 2..dim {
            out[[0, q, c]] = noise.sample(&mut rng);
        }
    }
    out
}

/// Ground-truth frame: boxes, plan with per-step obstacles, and risk boxes.
pub fn gt_record(scene: &SyntheticScene) -> FrameRecord {
    let obstacles = (1..=scene.ego_plan.len())
        .map(|i| {
            let t = i as f64 / scene.planning_hz;
            scene.objects.iter().map(|o| o.footprint(t)).collect()
        })
        .collect();
    FrameRecord {
        gt: Some(scene.objects.iter().map(SceneObject::detection).collect()),
        gt_plan: Some(GtPlan {
            waypoints: scene.ego_plan.clone(),
            ego_size: scene.ego_size,
            obstacles,
        }),
        risk_gt: Some(risk_ground_truth(scene)),
        ..FrameRecord::new(FRAME_ID)
    }
}

/// A plausible noisy perception/planning output for the scene.
pub fn noisy_prediction(scene: &SyntheticScene) -> FrameRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let pos = Normal::new(0.0, 0.3).expect("valid sigma");
    let ang = Normal::new(0.0, 0.1).expect("valid sigma");
    let mut detections = Vec::new();
    for obj in &scene.objects {
        // occasional miss
        if rng.random_bool(0.1) {
            continue;
        }
        let mut d = obj.detection();
        d.position[0] += pos.sample(&mut rng);
        d.position[1] += pos.sample(&mut rng);
        for s in &mut d.size {
            *s *= rng.random_range(0.9..1.1);
        }
        d.yaw += ang.sample(&mut rng);
        d.velocity[0] += pos.sample(&mut rng);
        d.velocity[1] += pos.sample(&mut rng);
        d.score = Some(rng.random_range(0.5..1.0));
        detections.push(d);
    }
    for _ in 0..scene.objects.len() / 6 {
        let (category, size, _) = CATEGORIES[rng.random_range(0..CATEGORIES.len())];
        let bearing = rng.random_range(0.0..2.0 * PI);
        let dist = rng.random_range(6.0..45.0);
        detections.push(Detection {
            category: category.to_string(),
            position: [dist * bearing.cos(), dist * bearing.sin(), GROUND_Z + size[2] / 2.0],
            size,
            yaw: rng.random_range(-PI..PI),
            velocity: [0.0, 0.0],
            score: Some(rng.random_range(0.1..0.6)),
        });
    }
    let mut drift = [0.0, 0.0];
    let waypoints = scene
        .ego_plan
        .iter()
        .map(|w| {
            drift[0] += 0.5 * pos.sample(&mut rng);
            drift[1] += 0.5 * pos.sample(&mut rng);
            [w[0] + drift[0], w[1] + drift[1]]
        })
        .collect();
    FrameRecord {
        detections: Some(detections),
        plan: Some(Plan { waypoints }),
        ..FrameRecord::new(FRAME_ID)
    }
}

pub const RIG_FILE: &str = "rig.json";
pub const SCENE_FILE: &str = "scene.json";
pub const GT_FILE: &str = "gt.jsonl";
pub const PRED_FILE: &str = "pred.jsonl";
pub const QUERIES_FILE: &str = "bev_queries.bin";

/// Writes rig, scene description, ground truth, a noisy prediction and the
/// BEV queries into `dir`.
pub fn write_scene(scene: &SyntheticScene, cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut rig = scene.rig.to_json();
    rig.push('\n');
    io::write_bytes(&dir.join(RIG_FILE), rig.as_bytes())?;
    io::write_json(&dir.join(SCENE_FILE), scene)?;
    crate::metrics::write_frames(&dir.join(GT_FILE), &[gt_record(scene)])?;
    crate::metrics::write_frames(&dir.join(PRED_FILE), &[noisy_prediction(scene)])?;
    let q = bev_queries(scene, cfg);
    let mut bundle = TensorBundle::new();
    bundle.push("bev_queries", q.shape(), q.iter().copied());
    bundle.set_meta("rows", cfg.grid.rows.into());
    bundle.set_meta("cols", cfg.grid.cols.into());
    bundle.write(&dir.join(QUERIES_FILE))?;
    Ok(())
}
