//! Camera rigs, pillar reference points and the BEV visibility mask.
//!
//! Reference points live in the normalized BEV volume `[0,1]^3`. They are
//! scaled to metric lidar coordinates by a [`PointCloudRange`], pushed through
//! each camera's 4x4 `lidar2img` matrix and normalized by the image size. A
//! point is visible in a camera when it lands strictly inside the image and
//! strictly in front of the camera (`depth > eps`).

use nalgebra::{Matrix3, Matrix4, Vector4};
use ndarray::{Array3, Array4, Array5};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Depth threshold below which a projection is degenerate or behind the camera.
pub const DEFAULT_DEPTH_EPS: f64 = 1e-5;

/// Normalized coordinate reported for projections with `|depth| <= eps`.
pub const DEGENERATE_COORD: f64 = -1.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid point cloud range: {0}")]
    InvalidRange(String),
    #[error("normalized coordinate {axis} = {value} is outside [0, 1]")]
    OutOfDomain { axis: char, value: f64 },
    #[error("invalid camera rig: {0}")]
    InvalidRig(String),
    #[error("invalid BEV grid: {0}")]
    InvalidGrid(String),
    #[error("malformed rig json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Metric extent of the BEV volume, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloudRange {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for PointCloudRange {
    fn default() -> Self {
        Self {
            x_min: -51.2,
            x_max: 51.2,
            y_min: -51.2,
            y_max: 51.2,
            z_min: -5.0,
            z_max: 3.0,
        }
    }
}

impl PointCloudRange {
    pub fn new(x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> Result<Self> {
        let range = Self {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            z_min: z.0,
            z_max: z.1,
        };
        range.validate()?;
        Ok(range)
    }

    /// Symmetric cube `[-half, half]^3`.
    pub fn cube(half: f64) -> Result<Self> {
        Self::new((-half, half), (-half, half), (-half, half))
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, lo, hi) in [
            ('x', self.x_min, self.x_max),
            ('y', self.y_min, self.y_max),
            ('z', self.z_min, self.z_max),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(GeometryError::InvalidRange(format!(
                    "{axis}: need finite min < max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    fn axis(&self, i: usize) -> (f64, f64) {
        match i {
            0 => (self.x_min, self.x_max),
            1 => (self.y_min, self.y_max),
            _ => (self.z_min, self.z_max),
        }
    }
}

/// Map a normalized `(x, y, z)` in `[0,1]^3` to a homogeneous metric point.
pub fn scale_reference_point(r_norm: [f64; 3], range: &PointCloudRange) -> Result<Vector4<f64>> {
    let mut out = Vector4::new(0.0, 0.0, 0.0, 1.0);
    for (i, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
        let v = r_norm[i];
        if !(0.0..=1.0).contains(&v) {
            return Err(GeometryError::OutOfDomain { axis, value: v });
        }
        let (lo, hi) = range.axis(i);
        out[i] = v * (hi - lo) + lo;
    }
    Ok(out)
}

/// One camera of the rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub name: String,
    pub width: u32,
    pub height: u32,
    /// Homogeneous lidar-frame point to (u*z, v*z, z, 1) in pixels.
    #[serde(serialize_with = "ser_row_major", deserialize_with = "de_row_major")]
    pub lidar2img: Matrix4<f64>,
}

fn ser_row_major<S: Serializer>(m: &Matrix4<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let flat: Vec<f64> = (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect();
    flat.serialize(s)
}

fn de_row_major<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Matrix4<f64>, D::Error> {
    let flat = Vec::<f64>::deserialize(d)?;
    if flat.len() != 16 {
        return Err(serde::de::Error::invalid_length(
            flat.len(),
            &"16 row-major reals",
        ));
    }
    Ok(Matrix4::from_row_slice(&flat))
}

impl Camera {
    /// Pinhole camera at `position` (lidar frame) looking along `yaw` in the
    /// ground plane, x-forward / y-left / z-up lidar convention.
    pub fn pinhole(
        name: &str,
        width: u32,
        height: u32,
        focal: f64,
        yaw: f64,
        position: [f64; 3],
    ) -> Self {
        let (s, c) = yaw.sin_cos();
        // rows: camera right, camera down, camera forward
        let rot = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
        let center = nalgebra::Vector3::from(position);
        let t = -(rot * center);
        let mut extrinsic = Matrix4::identity();
        extrinsic.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        extrinsic.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let intrinsic = intrinsic4(focal, focal, width as f64 / 2.0, height as f64 / 2.0);
        Self {
            name: name.to_string(),
            width,
            height,
            lidar2img: intrinsic * extrinsic,
        }
    }

    pub fn project(&self, p: &Vector4<f64>, eps: f64) -> Projection {
        project_point(p, &self.lidar2img, self.width as f64, self.height as f64, eps)
    }
}

fn intrinsic4(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix4<f64> {
    let mut k = Matrix4::identity();
    k[(0, 0)] = fx;
    k[(1, 1)] = fy;
    k[(0, 2)] = cx;
    k[(1, 2)] = cy;
    k
}

/// Ordered set of cameras sharing one lidar frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl<'de> Deserialize<'de> for CameraRig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            List(Vec<Camera>),
            Object { cameras: Vec<Camera> },
        }
        let cameras = match Repr::deserialize(d)? {
            Repr::List(c) | Repr::Object { cameras: c } => c,
        };
        Ok(CameraRig { cameras })
    }
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        let rig = Self { cameras };
        rig.validate()?;
        Ok(rig)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(GeometryError::InvalidRig("rig has no cameras".into()));
        }
        for cam in &self.cameras {
            if cam.width == 0 || cam.height == 0 {
                return Err(GeometryError::InvalidRig(format!(
                    "camera `{}` has zero image size {}x{}",
                    cam.name, cam.width, cam.height
                )));
            }
            if cam.lidar2img.iter().any(|v| !v.is_finite()) {
                return Err(GeometryError::InvalidRig(format!(
                    "camera `{}` has a non-finite lidar2img entry",
                    cam.name
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rig: CameraRig = serde_json::from_str(text)?;
        rig.validate()?;
        Ok(rig)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rig serializes")
    }

    /// Load the per-frame sensor block of a Bench2Drive annotation.
    ///
    /// Expects `{"sensors": {"CAM_*": {"intrinsic": 3x3, "world2cam": 4x4}, ...,
    /// "LIDAR_TOP": {"world2lidar": 4x4}}}` and builds
    /// `lidar2img = K * world2cam * inverse(world2lidar)`.
    pub fn from_bench2drive_json(text: &str, width: u32, height: u32) -> Result<Self> {
        const ORDER: [&str; 6] = [
            "CAM_FRONT",
            "CAM_FRONT_LEFT",
            "CAM_FRONT_RIGHT",
            "CAM_BACK",
            "CAM_BACK_LEFT",
            "CAM_BACK_RIGHT",
        ];
        let root: serde_json::Value = serde_json::from_str(text)?;
        let sensors = root
            .get("sensors")
            .and_then(|s| s.as_object())
            .ok_or_else(|| GeometryError::InvalidRig("missing `sensors` object".into()))?;
        let world2lidar = sensors
            .get("LIDAR_TOP")
            .and_then(|l| l.get("world2lidar"))
            .ok_or_else(|| GeometryError::InvalidRig("missing LIDAR_TOP.world2lidar".into()))
            .and_then(|v| matrix_from_rows::<4>(v, "world2lidar"))?;
        let lidar2world = world2lidar
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidRig("world2lidar is singular".into()))?;

        let mut names: Vec<&String> = sensors.keys().filter(|k| k.starts_with("CAM_")).collect();
        names.sort_by_key(|n| {
            (
                ORDER.iter().position(|o| o == n).unwrap_or(ORDER.len()),
                n.to_string(),
            )
        });
        let mut cameras = Vec::with_capacity(names.len());
        for name in names {
            let sensor = &sensors[name.as_str()];
            let k = sensor
                .get("intrinsic")
                .ok_or_else(|| GeometryError::InvalidRig(format!("{name}: missing intrinsic")))
                .and_then(|v| matrix_from_rows::<3>(v, "intrinsic"))?;
            let world2cam = sensor
                .get("world2cam")
                .ok_or_else(|| GeometryError::InvalidRig(format!("{name}: missing world2cam")))
                .and_then(|v| matrix_from_rows::<4>(v, "world2cam"))?;
            let mut k4 = Matrix4::identity();
            for r in 0..3 {
                for c in 0..3 {
                    k4[(r, c)] = k[(r, c)];
                }
            }
            cameras.push(Camera {
                name: name.clone(),
                width,
                height,
                lidar2img: k4 * world2cam * lidar2world,
            });
        }
        CameraRig::new(cameras)
    }
}

fn matrix_from_rows<const N: usize>(
    value: &serde_json::Value,
    what: &str,
) -> Result<nalgebra::SMatrix<f64, N, N>> {
    let rows: Vec<Vec<f64>> = serde_json::from_value(value.clone())?;
    if rows.len() != N || rows.iter().any(|r| r.len() != N) {
        return Err(GeometryError::InvalidRig(format!("{what} must be {N}x{N}")));
    }
    Ok(nalgebra::SMatrix::<f64, N, N>::from_fn(|r, c| rows[r][c]))
}

/// Result of projecting one homogeneous point into one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub x_norm: f64,
    pub y_norm: f64,
    pub depth: f64,
}

impl Projection {
    /// Strict in-image test plus positive depth.
    pub fn is_visible(&self, eps: f64) -> bool {
        self.depth > eps
            && self.x_norm > 0.0
            && self.x_norm < 1.0
            && self.y_norm > 0.0
            && self.y_norm < 1.0
    }
}

/// Project `p_scaled` through `lidar2img` and normalize by the image size.
///
/// When `|depth| <= eps` the coordinates are [`DEGENERATE_COORD`].
pub fn project_point(
    p_scaled: &Vector4<f64>,
    lidar2img: &Matrix4<f64>,
    width: f64,
    height: f64,
    eps: f64,
) -> Projection {
    let r_cam = lidar2img * p_scaled;
    let depth = r_cam[2];
    if depth.abs() <= eps {
        return Projection {
            x_norm: DEGENERATE_COORD,
            y_norm: DEGENERATE_COORD,
            depth,
        };
    }
    Projection {
        x_norm: r_cam[0] / depth / width,
        y_norm: r_cam[1] / depth / height,
        depth,
    }
}

/// The H x W query lattice over a metric range, lifted to `z_samples` heights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub rows: usize,
    pub cols: usize,
    pub z_samples: usize,
    pub range: PointCloudRange,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self {
            rows: 100,
            cols: 100,
            z_samples: 4,
            range: PointCloudRange::default(),
        }
    }
}

impl BevGrid {
    pub fn new(rows: usize, cols: usize, z_samples: usize, range: PointCloudRange) -> Result<Self> {
        let grid = Self {
            rows,
            cols,
            z_samples,
            range,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(GeometryError::InvalidGrid(format!(
                "grid must be non-empty, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.z_samples == 0 {
            return Err(GeometryError::InvalidGrid("need at least one height sample".into()));
        }
        self.range.validate()
    }

    pub fn n_bev(&self) -> usize {
        self.rows * self.cols
    }

    /// Normalized `(x, y)` center of flat query `q` (row-major).
    pub fn cell_center(&self, q: usize) -> (f64, f64) {
        let (row, col) = (q / self.cols, q % self.cols);
        (
            (col as f64 + 0.5) / self.cols as f64,
            (row as f64 + 0.5) / self.rows as f64,
        )
    }

    /// Flat query index of the cell containing the metric point `(x, y)`.
    pub fn cell_of_metric(&self, x: f64, y: f64) -> Option<usize> {
        let u = (x - self.range.x_min) / (self.range.x_max - self.range.x_min);
        let v = (y - self.range.y_min) / (self.range.y_max - self.range.y_min);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return None;
        }
        let col = (u * self.cols as f64) as usize;
        let row = (v * self.rows as f64) as usize;
        Some(row.min(self.rows - 1) * self.cols + col.min(self.cols - 1))
    }
}

/// Normalized pillar samples, shape `[N_BEV, D, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePoints3D {
    pub points: Array3<f64>,
}

impl ReferencePoints3D {
    pub fn n_bev(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn z_samples(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn point(&self, q: usize, d: usize) -> [f64; 3] {
        [
            self.points[[q, d, 0]],
            self.points[[q, d, 1]],
            self.points[[q, d, 2]],
        ]
    }
}

/// Lift every BEV cell to a vertical pillar of `z_samples` evenly spaced points.
pub fn lift_bev_to_pillar(grid: &BevGrid) -> ReferencePoints3D {
    let depth = grid.z_samples;
    let points = Array3::from_shape_fn((grid.n_bev(), depth, 3), |(q, d, axis)| {
        let (x, y) = grid.cell_center(q);
        match axis {
            0 => x,
            1 => y,
            _ => (d as f64 + 0.5) / depth as f64,
        }
    });
    ReferencePoints3D { points }
}

/// Projected reference points, `coords: [B, N_cam, N_BEV, D, 2]`,
/// `depth: [B, N_cam, N_BEV, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoints2D {
    pub coords: Array5<f64>,
    pub depth: Array4<f64>,
}

/// Visibility of each reference point in each camera, `[B, N_cam, N_BEV, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BevMask {
    pub visible: Array4<bool>,
}

impl BevMask {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.visible.dim()
    }

    /// One `(camera, height)` slice laid out on the grid, 255 where visible.
    pub fn slice_image(&self, batch: usize, camera: usize, height: usize) -> Vec<u8> {
        let (_, _, n_bev, _) = self.dims();
        (0..n_bev)
            .map(|q| {
                if self.visible[[batch, camera, q, height]] {
                    255
                } else {
                    0
                }
            })
            .collect()
    }
}

/// Project every pillar sample into every camera of every batch rig.
///
/// `rigs` holds one rig per batch element; all must have the same camera count.
pub fn compute_bev_mask(
    grid: &BevGrid,
    ref3d: &ReferencePoints3D,
    rigs: &[CameraRig],
    eps: f64,
) -> Result<(ProjectedPoints2D, BevMask)> {
    grid.validate()?;
    if rigs.is_empty() {
        return Err(GeometryError::InvalidRig("batch has no rigs".into()));
    }
    for rig in rigs {
        rig.validate()?;
    }
    let n_cam = rigs[0].len();
    if rigs.iter().any(|r| r.len() != n_cam) {
        return Err(GeometryError::InvalidRig(
            "all rigs in a batch must have the same camera count".into(),
        ));
    }
    if ref3d.n_bev() != grid.n_bev() || ref3d.z_samples() != grid.z_samples {
        return Err(GeometryError::InvalidGrid(format!(
            "reference points {:?} do not match grid {}x{}x{}",
            ref3d.points.shape(),
            grid.rows,
            grid.cols,
            grid.z_samples
        )));
    }
    let (n_bev, depth) = (grid.n_bev(), grid.z_samples);

    let mut scaled = Vec::with_capacity(n_bev * depth);
    for q in 0..n_bev {
        for d in 0..depth {
            scaled.push(scale_reference_point(ref3d.point(q, d), &grid.range)?);
        }
    }

    let batch = rigs.len();
    let slices: Vec<Vec<Projection>> = (0..batch * n_cam)
        .into_par_iter()
        .map(|bk| {
            let cam = &rigs[bk / n_cam].cameras[bk % n_cam];
            scaled.iter().map(|p| cam.project(p, eps)).collect()
        })
        .collect();

    let mut coords = Array5::zeros((batch, n_cam, n_bev, depth, 2));
    let mut depths = Array4::zeros((batch, n_cam, n_bev, depth));
    let mut visible = Array4::from_elem((batch, n_cam, n_bev, depth), false);
    for (bk, slice) in slices.iter().enumerate() {
        let (b, k) = (bk / n_cam, bk % n_cam);
        for (i, p) in slice.iter().enumerate() {
            let (q, d) = (i / depth, i % depth);
            coords[[b, k, q, d, 0]] = p.x_norm;
            coords[[b, k, q, d, 1]] = p.y_norm;
            depths[[b, k, q, d]] = p.depth;
            visible[[b, k, q, d]] = p.is_visible(eps);
        }
    }
    Ok((
        ProjectedPoints2D {
            coords,
            depth: depths,
        },
        BevMask { visible },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn axis_camera(width: u32, height: u32) -> Matrix4<f64> {
        // camera frame == lidar frame, focal W/2, principal point at the center
        let w = width as f64;
        intrinsic4(w / 2.0, w / 2.0, w / 2.0, height as f64 / 2.0)
    }

    #[test]
    fn scale_lower_corner_and_midpoint() {
        let range = PointCloudRange::cube(50.0).unwrap();
        let lo = scale_reference_point([0.0, 0.0, 0.0], &range).unwrap();
        assert_eq!(lo, Vector4::new(-50.0, -50.0, -50.0, 1.0));
        let mid = scale_reference_point([0.5, 0.5, 0.5], &range).unwrap();
        assert_eq!(mid, Vector4::new(0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn scale_asymmetric_range() {
        let range = PointCloudRange::new((-50.0, 50.0), (-50.0, 50.0), (-5.0, 3.0)).unwrap();
        let p = scale_reference_point([0.25, 0.75, 1.0], &range).unwrap();
        assert_eq!(p, Vector4::new(-25.0, 25.0, 3.0, 1.0));
    }

    #[test]
    fn scale_rejects_out_of_domain() {
        let range = PointCloudRange::default();
        let err = scale_reference_point([0.5, 1.01, 0.5], &range).unwrap_err();
        assert!(matches!(err, GeometryError::OutOfDomain { axis: 'y', .. }));
        assert!(scale_reference_point([f64::NAN, 0.5, 0.5], &range).is_err());
    }

    #[test]
    fn range_validation() {
        assert!(PointCloudRange::new((1.0, 1.0), (0.0, 1.0), (0.0, 1.0)).is_err());
        assert!(PointCloudRange::new((0.0, 1.0), (2.0, 1.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn lift_single_cell() {
        let grid = BevGrid::new(1, 1, 1, PointCloudRange::default()).unwrap();
        let r = lift_bev_to_pillar(&grid);
        assert_eq!(r.point(0, 0), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn lift_two_by_two_cell_centers() {
        let grid = BevGrid::new(2, 2, 1, PointCloudRange::default()).unwrap();
        let r = lift_bev_to_pillar(&grid);
        let xy: Vec<(f64, f64)> = (0..4).map(|q| (r.point(q, 0)[0], r.point(q, 0)[1])).collect();
        assert_eq!(xy, vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]);
    }

    #[test]
    fn lift_even_heights() {
        let grid = BevGrid::new(1, 1, 4, PointCloudRange::default()).unwrap();
        let r = lift_bev_to_pillar(&grid);
        let z: Vec<f64> = (0..4).map(|d| r.point(0, d)[2]).collect();
        assert_eq!(z, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn project_principal_point() {
        let m = axis_camera(200, 100);
        let p = project_point(&Vector4::new(0.0, 0.0, 10.0, 1.0), &m, 200.0, 100.0, DEFAULT_DEPTH_EPS);
        assert_eq!((p.x_norm, p.y_norm, p.depth), (0.5, 0.5, 10.0));
    }

    #[test]
    fn project_lateral_offset_hits_right_border() {
        // x offset = depth * 1 → x_2d = f * 1 + W/2 = W → x_norm = 1
        let m = axis_camera(200, 100);
        let p = project_point(&Vector4::new(10.0, 0.0, 10.0, 1.0), &m, 200.0, 100.0, DEFAULT_DEPTH_EPS);
        assert_abs_diff_eq!(p.x_norm, 1.0, epsilon = 1e-15);
        assert!(!p.is_visible(DEFAULT_DEPTH_EPS), "border is excluded");
    }

    #[test]
    fn project_behind_camera() {
        let m = axis_camera(200, 100);
        let p = project_point(&Vector4::new(0.0, 0.0, -5.0, 1.0), &m, 200.0, 100.0, DEFAULT_DEPTH_EPS);
        assert_eq!(p.depth, -5.0);
        assert!(p.x_norm.is_finite());
        assert!(!p.is_visible(DEFAULT_DEPTH_EPS));
    }

    #[test]
    fn project_degenerate_depth_uses_sentinel() {
        let m = axis_camera(200, 100);
        let p = project_point(&Vector4::new(3.0, 2.0, 0.0, 1.0), &m, 200.0, 100.0, DEFAULT_DEPTH_EPS);
        assert_eq!((p.x_norm, p.y_norm), (DEGENERATE_COORD, DEGENERATE_COORD));
        let at_eps = Projection {
            x_norm: 0.5,
            y_norm: 0.5,
            depth: DEFAULT_DEPTH_EPS,
        };
        assert!(!at_eps.is_visible(DEFAULT_DEPTH_EPS));
    }

    #[test]
    fn mask_all_behind() {
        let grid = BevGrid::new(4, 4, 2, PointCloudRange::cube(10.0).unwrap()).unwrap();
        let ref3d = lift_bev_to_pillar(&grid);
        // camera looking straight up from far above the volume: everything is behind it
        let mut m = Matrix4::identity();
        m[(2, 2)] = -1.0;
        m[(2, 3)] = -100.0;
        let rig = CameraRig::new(vec![Camera {
            name: "up".into(),
            width: 10,
            height: 10,
            lidar2img: m,
        }])
        .unwrap();
        let (proj, mask) = compute_bev_mask(&grid, &ref3d, &[rig], DEFAULT_DEPTH_EPS).unwrap();
        assert!(mask.visible.iter().all(|v| !v));
        assert!(proj.depth.iter().all(|d| *d < 0.0));
    }

    #[test]
    fn mask_full_coverage_camera() {
        // a downward-looking orthographic-ish camera whose image spans the whole range
        let range = PointCloudRange::new((-10.0, 10.0), (-10.0, 10.0), (-1.0, 1.0)).unwrap();
        let grid = BevGrid::new(5, 7, 3, range).unwrap();
        let ref3d = lift_bev_to_pillar(&grid);
        let (w, h) = (40.0, 40.0);
        // u = (x + 10) * 2, v = (y + 10) * 2, depth = 5 constant
        let mut m = Matrix4::zeros();
        m[(0, 0)] = 2.0 * 5.0;
        m[(0, 3)] = 20.0 * 5.0;
        m[(1, 1)] = 2.0 * 5.0;
        m[(1, 3)] = 20.0 * 5.0;
        m[(2, 3)] = 5.0;
        m[(3, 3)] = 1.0;
        let rig = CameraRig::new(vec![Camera {
            name: "down".into(),
            width: w as u32,
            height: h as u32,
            lidar2img: m,
        }])
        .unwrap();
        let (_, mask) = compute_bev_mask(&grid, &ref3d, &[rig], DEFAULT_DEPTH_EPS).unwrap();
        assert!(mask.visible.iter().all(|v| *v));
    }

    #[test]
    fn mask_rejects_inconsistent_batch() {
        let grid = BevGrid::new(2, 2, 1, PointCloudRange::default()).unwrap();
        let ref3d = lift_bev_to_pillar(&grid);
        let cam = Camera::pinhole("a", 100, 50, 50.0, 0.0, [0.0; 3]);
        let one = CameraRig::new(vec![cam.clone()]).unwrap();
        let two = CameraRig::new(vec![cam.clone(), cam]).unwrap();
        assert!(compute_bev_mask(&grid, &ref3d, &[one, two], DEFAULT_DEPTH_EPS).is_err());
        assert!(compute_bev_mask(&grid, &ref3d, &[], DEFAULT_DEPTH_EPS).is_err());
    }

    #[test]
    fn pinhole_camera_sees_forward_point() {
        let cam = Camera::pinhole("front", 1600, 900, 800.0, 0.0, [0.0, 0.0, 1.5]);
        let ahead = cam.project(&Vector4::new(10.0, 0.0, 1.5, 1.0), DEFAULT_DEPTH_EPS);
        assert_abs_diff_eq!(ahead.x_norm, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ahead.y_norm, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ahead.depth, 10.0, epsilon = 1e-12);
        // a point to the left (+y) lands on the left half of the image
        let left = cam.project(&Vector4::new(10.0, 2.0, 1.5, 1.0), DEFAULT_DEPTH_EPS);
        assert!(left.x_norm < 0.5);
        let behind = cam.project(&Vector4::new(-10.0, 0.0, 1.5, 1.0), DEFAULT_DEPTH_EPS);
        assert!(!behind.is_visible(DEFAULT_DEPTH_EPS));
        // rotating the camera by 90 degrees makes +y the forward direction
        let left_cam = Camera::pinhole("left", 1600, 900, 800.0, std::f64::consts::FRAC_PI_2, [0.0; 3]);
        let p = left_cam.project(&Vector4::new(0.0, 10.0, 0.0, 1.0), DEFAULT_DEPTH_EPS);
        assert_abs_diff_eq!(p.depth, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn rig_json_row_major() {
        let cam = Camera::pinhole("front", 64, 32, 30.0, 0.3, [0.5, -0.2, 1.6]);
        let rig = CameraRig::new(vec![cam.clone()]).unwrap();
        let text = rig.to_json();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let flat = value[0]["lidar2img"].as_array().unwrap();
        assert_eq!(flat.len(), 16);
        assert_eq!(flat[3].as_f64().unwrap(), cam.lidar2img[(0, 3)]);
        assert_eq!(CameraRig::from_json(&text).unwrap(), rig);
        let wrapped = format!("{{\"cameras\": {text}}}");
        assert_eq!(CameraRig::from_json(&wrapped).unwrap(), rig);
    }

    #[test]
    fn rig_json_rejects_bad_matrix() {
        let text = r#"[{"name":"a","width":10,"height":10,"lidar2img":[1,2,3]}]"#;
        assert!(CameraRig::from_json(text).is_err());
        let text = r#"[{"name":"a","width":0,"height":10,"lidar2img":[1,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1]}]"#;
        assert!(matches!(CameraRig::from_json(text), Err(GeometryError::InvalidRig(_))));
        assert!(CameraRig::from_json("[]").is_err());
    }

    #[test]
    fn bench2drive_loader_matches_direct_composition() {
        let cam = Camera::pinhole("CAM_FRONT", 1600, 900, 1142.5, 0.0, [0.8, 0.0, 1.6]);
        // identity world2lidar: world2cam is then lidar2cam
        let k = [[1142.5, 0.0, 800.0], [0.0, 1142.5, 450.0], [0.0, 0.0, 1.0]];
        let k4 = intrinsic4(1142.5, 1142.5, 800.0, 450.0);
        let world2cam = k4.try_inverse().unwrap() * cam.lidar2img;
        let rows = |m: &Matrix4<f64>| -> Vec<Vec<f64>> {
            (0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect()).collect()
        };
        let doc = serde_json::json!({
            "sensors": {
                "CAM_FRONT": {"intrinsic": k, "world2cam": rows(&world2cam)},
                "LIDAR_TOP": {"world2lidar": rows(&Matrix4::identity())}
            }
        });
        let rig = CameraRig::from_bench2drive_json(&doc.to_string(), 1600, 900).unwrap();
        assert_eq!(rig.len(), 1);
        for (a, b) in rig.cameras[0].lidar2img.iter().zip(cam.lidar2img.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn cell_of_metric_inverts_cell_center() {
        let grid = BevGrid::new(10, 20, 1, PointCloudRange::default()).unwrap();
        for q in [0, 7, 45, 199] {
            let (u, v) = grid.cell_center(q);
            let x = grid.range.x_min + u * (grid.range.x_max - grid.range.x_min);
            let y = grid.range.y_min + v * (grid.range.y_max - grid.range.y_min);
            assert_eq!(grid.cell_of_metric(x, y), Some(q));
        }
        assert_eq!(grid.cell_of_metric(1e3, 0.0), None);
    }
}
