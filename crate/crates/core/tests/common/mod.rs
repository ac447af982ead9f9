//! Brute-force reference implementations shared by the integration tests.
//! Each one is written from the definitions with plain loops and does not
//! call the library routine it checks.
#![allow(dead_code)]

use ndarray::{Array3, Array4};
use rand::Rng;
use rsd::geometry::{BevGrid, Camera, CameraRig};
use rsd::metrics::OrientedRect;
use rsd::riskhead::{DeformAttnParams, FeatureMap, Linear};

/// Visibility and normalized coordinates of every pillar point, `[K][N][D]`.
pub struct MaskOracle {
    pub visible: Vec<Vec<Vec<bool>>>,
    pub coords: Vec<Vec<Vec<(f64, f64)>>>,
}

pub fn mask_oracle(grid: &BevGrid, rig: &CameraRig, eps: f64) -> MaskOracle {
    let r = grid.range;
    let mut visible = Vec::new();
    let mut coords = Vec::new();
    for cam in &rig.cameras {
        let mut vis_k = Vec::new();
        let mut co_k = Vec::new();
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let nx = (col as f64 + 0.5) / grid.cols as f64;
                let ny = (row as f64 + 0.5) / grid.rows as f64;
                let mut vis_q = Vec::new();
                let mut co_q = Vec::new();
                for d in 0..grid.z_samples {
                    let nz = (d as f64 + 0.5) / grid.z_samples as f64;
                    let p = [
                        nx * (r.x_max - r.x_min) + r.x_min,
                        ny * (r.y_max - r.y_min) + r.y_min,
                        nz * (r.z_max - r.z_min) + r.z_min,
                        1.0,
                    ];
                    let m = &cam.lidar2img;
                    let mut out = [0.0; 3];
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = m[(i, 0)] * p[0] + m[(i, 1)] * p[1] + m[(i, 2)] * p[2] + m[(i, 3)] * p[3];
                    }
                    let depth = out[2];
                    if depth.abs() <= eps {
                        vis_q.push(false);
                        co_q.push((-1.0, -1.0));
                        continue;
                    }
                    let x = out[0] / depth / cam.width as f64;
                    let y = out[1] / depth / cam.height as f64;
                    vis_q.push(depth > eps && x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0);
                    co_q.push((x, y));
                }
                vis_k.push(vis_q);
                co_k.push(co_q);
            }
        }
        visible.push(vis_k);
        coords.push(co_k);
    }
    MaskOracle { visible, coords }
}

/// A random rig: pinhole cameras around the ego plus perturbed matrices.
pub fn random_rig(rng: &mut impl Rng) -> CameraRig {
    let n = rng.random_range(1..=6);
    let cameras = (0..n)
        .map(|i| {
            let mut cam = Camera::pinhole(
                &format!("cam{i}"),
                rng.random_range(200..1800),
                rng.random_range(200..1000),
                rng.random_range(300.0..1500.0),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                [rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..2.0)],
            );
            if rng.random_bool(0.3) {
                for v in cam.lidar2img.iter_mut() {
                    *v += rng.random_range(-1.0..1.0);
                }
            }
            cam
        })
        .collect();
    CameraRig::new(cameras).expect("valid rig")
}

/// Bilinear interpolation at normalized `loc`, pixel centers at
/// `(i + 0.5) / size`, zero outside the map.
pub fn bilinear_oracle(map: &Array3<f64>, loc: (f64, f64)) -> Vec<f64> {
    let (h, w, dim) = map.dim();
    let px = loc.0 * w as f64 - 0.5;
    let py = loc.1 * h as f64 - 0.5;
    let mut out = vec![0.0; dim];
    let (x0, y0) = (px.floor(), py.floor());
    for (dy, wy) in [(0.0, 1.0 - (py - y0)), (1.0, py - y0)] {
        for (dx, wx) in [(0.0, 1.0 - (px - x0)), (1.0, px - x0)] {
            let (row, col) = (y0 + dy, x0 + dx);
            if row < 0.0 || col < 0.0 || row >= h as f64 || col >= w as f64 {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += wx * wy * map[[row as usize, col as usize, c]];
            }
        }
    }
    out
}

fn affine(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.weight.nrows())
        .map(|r| l.bias[r] + (0..x.len()).map(|c| l.weight[[r, c]] * x[c]).sum::<f64>())
        .collect()
}

/// Multi-head deformable attention of one query into a raw value map.
pub fn deform_oracle(q: &[f64], reference: (f64, f64), values: &Array3<f64>, p: &DeformAttnParams) -> Vec<f64> {
    let (h, w, dim) = values.dim();
    let mut projected = Array3::zeros((h, w, dim));
    for r in 0..h {
        for c in 0..w {
            let cell: Vec<f64> = (0..dim).map(|k| values[[r, c, k]]).collect();
            for (k, v) in affine(&p.value_proj, &cell).into_iter().enumerate() {
                projected[[r, c, k]] = v;
            }
        }
    }
    let offsets = affine(&p.offset_net, q);
    let logits = affine(&p.weight_net, q);
    let hd = dim / p.n_heads;
    let mut heads = vec![0.0; dim];
    for head in 0..p.n_heads {
        let group = &logits[head * p.n_points..(head + 1) * p.n_points];
        let max = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = group.iter().map(|l| (l - max).exp()).sum();
        for j in 0..p.n_points {
            let hj = head * p.n_points + j;
            let weight = (group[j] - max).exp() / z;
            let loc = (
                reference.0 + p.offset_scale * offsets[2 * hj],
                reference.1 + p.offset_scale * offsets[2 * hj + 1],
            );
            let s = bilinear_oracle(&projected, loc);
            for k in 0..hd {
                heads[head * hd + k] += weight * s[head * hd + k];
            }
        }
    }
    affine(&p.output_proj, &heads)
}

pub fn feature_map(a: &Array3<f64>) -> FeatureMap {
    FeatureMap::new(a.clone())
}

/// Nearest candidate by min-over-heights Euclidean distance; smallest index
/// wins ties. `candidates[l][d] = (x, y)`.
pub fn nn_oracle(candidates: &[Vec<(f64, f64)>], point: (f64, f64)) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (l, heights) in candidates.iter().enumerate() {
        let d = heights
            .iter()
            .map(|&(x, y)| ((point.0 - x) * (point.0 - x) + (point.1 - y) * (point.1 - y)).sqrt())
            .fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((l, d));
        }
    }
    best
}

/// All candidates ordered by (distance, index).
pub fn ranked_candidates(candidates: &[Vec<(f64, f64)>], point: (f64, f64)) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(l, heights)| {
            let d = heights
                .iter()
                .map(|&(x, y)| ((point.0 - x) * (point.0 - x) + (point.1 - y) * (point.1 - y)).sqrt())
                .fold(f64::INFINITY, f64::min);
            (d, l)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().map(|(_, l)| l).collect()
}

/// Scalar-loop risk head aggregation for batch element `b`:
/// `[views, H, W, d]` features and per-query hit counts.
#[allow(clippy::too_many_arguments)]
pub fn rha_oracle(
    pv: &Array4<f64>,
    queries: &Array3<f64>,
    visible: &Array4<bool>,
    coords: &ndarray::Array5<f64>,
    grid: &BevGrid,
    params: &DeformAttnParams,
    n_ref: usize,
    b: usize,
) -> (Array4<f64>, Vec<usize>) {
    let (views, h, w, dim) = pv.dim();
    let (_, n_cam, n_bev, depth) = visible.dim();
    assert_eq!(views, n_cam);
    let seen = |k: usize, q: usize| (0..depth).any(|d| visible[[b, k, q, d]]);
    let lattice = |k: usize| {
        Array3::from_shape_fn((grid.rows, grid.cols, dim), |(r, c, ch)| {
            let q = r * grid.cols + c;
            if seen(k, q) {
                queries[[b, q, ch]]
            } else {
                0.0
            }
        })
    };
    let lattices: Vec<Array3<f64>> = (0..n_cam).map(lattice).collect();
    let mut out = Array4::zeros((views, h, w, dim));
    let mut hits = Vec::new();
    for v in 0..views {
        let set: Vec<usize> = (0..n_bev).filter(|&q| seen(v, q)).collect();
        let cands: Vec<Vec<(f64, f64)>> = set
            .iter()
            .map(|&q| (0..depth).map(|d| (coords[[b, v, q, d, 0]], coords[[b, v, q, d, 1]])).collect())
            .collect();
        for r in 0..h {
            for c in 0..w {
                let q: Vec<f64> = (0..dim).map(|k| pv[[v, r, c, k]]).collect();
                let point = ((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
                let ranked = ranked_candidates(&cands, point);
                if ranked.is_empty() {
                    for k in 0..dim {
                        out[[v, r, c, k]] = q[k];
                    }
                    hits.push(0);
                    continue;
                }
                let anchor = set[ranked[0]];
                let hit: Vec<usize> = (0..n_cam).filter(|&i| seen(i, anchor)).collect();
                let mut acc = vec![0.0; dim];
                for &i in &hit {
                    for &l in ranked.iter().take(n_ref) {
                        let cell = set[l];
                        let reference = (
                            ((cell % grid.cols) as f64 + 0.5) / grid.cols as f64,
                            ((cell / grid.cols) as f64 + 0.5) / grid.rows as f64,
                        );
                        for (a, o) in acc.iter_mut().zip(deform_oracle(&q, reference, &lattices[i], params)) {
                            *a += o;
                        }
                    }
                }
                for k in 0..dim {
                    out[[v, r, c, k]] = acc[k] / hit.len() as f64;
                }
                hits.push(hit.len());
            }
        }
    }
    (out, hits)
}

/// Closed-set overlap by witness points: two convex polygons intersect iff
/// some vertex of one lies in the other or two edges cross. `tol` widens the
/// containment test to absorb rounding of the crossing points.
pub fn rects_overlap_oracle(a: &OrientedRect, b: &OrientedRect, tol: f64) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let mut witnesses: Vec<[f64; 2]> = ca.iter().chain(cb.iter()).copied().collect();
    for i in 0..4 {
        for j in 0..4 {
            if let Some(p) = segment_crossing(ca[i], ca[(i + 1) % 4], cb[j], cb[(j + 1) % 4]) {
                witnesses.push(p);
            }
        }
    }
    witnesses.iter().any(|p| contains(a, *p, tol) && contains(b, *p, tol))
}

/// Uniform interior and boundary samples of `a`, for a sampled overlap check.
pub fn sample_points(a: &OrientedRect, n: usize) -> Vec<[f64; 2]> {
    let [u, v] = a.axes();
    let mut out = Vec::with_capacity((n + 1) * (n + 1));
    for i in 0..=n {
        for j in 0..=n {
            let s = (2.0 * i as f64 / n as f64 - 1.0) * a.half_extents[0];
            let t = (2.0 * j as f64 / n as f64 - 1.0) * a.half_extents[1];
            out.push([a.center[0] + s * u[0] + t * v[0], a.center[1] + s * u[1] + t * v[1]]);
        }
    }
    out
}

pub fn contains(r: &OrientedRect, p: [f64; 2], tol: f64) -> bool {
    let (s, c) = r.yaw.sin_cos();
    let (dx, dy) = (p[0] - r.center[0], p[1] - r.center[1]);
    let along = dx * c + dy * s;
    let across = -dx * s + dy * c;
    along.abs() <= r.half_extents[0] + tol && across.abs() <= r.half_extents[1] + tol
}

fn segment_crossing(p: [f64; 2], p2: [f64; 2], q: [f64; 2], q2: [f64; 2]) -> Option<[f64; 2]> {
    let r = [p2[0] - p[0], p2[1] - p[1]];
    let s = [q2[0] - q[0], q2[1] - q[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom.abs() < 1e-300 {
        return None;
    }
    let qp = [q[0] - p[0], q[1] - p[1]];
    let t = (qp[0] * s[1] - qp[1] * s[0]) / denom;
    let u = (qp[0] * r[1] - qp[1] * r[0]) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some([p[0] + t * r[0], p[1] + t * r[1]])
    } else {
        None
    }
}
