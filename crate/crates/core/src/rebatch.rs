//! Per-camera repacking of visible BEV queries.
//!
//! Each camera only attends to the queries it can see. `extract_visible`
//! collects those query indices per (batch, camera), `rebatch` gathers them
//! into zero-padded `[B, N_cam, L_max, ...]` tensors and `scatter_back` is the
//! exact inverse on the visible entries.

use ndarray::{s, Array2, Array3, Array4, Array5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BevMask, ProjectedPoints2D};

#[derive(Debug, Error, PartialEq)]
pub enum RebatchError {
    #[error("index {index} out of range for {n_bev} BEV queries (batch {batch}, camera {camera})")]
    IndexOutOfRange {
        batch: usize,
        camera: usize,
        index: usize,
        n_bev: usize,
    },
    #[error("duplicate index {index} in batch {batch}, camera {camera}")]
    DuplicateIndex {
        batch: usize,
        camera: usize,
        index: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, RebatchError>;

/// Ascending visible query indices for every (batch, camera) pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibleIndexSets {
    pub batch: usize,
    pub n_cam: usize,
    /// Row-major over `(b, k)`.
    pub sets: Vec<Vec<usize>>,
    pub l_max: usize,
}

impl VisibleIndexSets {
    pub fn set(&self, b: usize, k: usize) -> &[usize] {
        &self.sets[b * self.n_cam + k]
    }

    pub fn total(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    /// Whether query `q` is visible in camera `k` of batch `b`.
    pub fn contains(&self, b: usize, k: usize, q: usize) -> bool {
        self.set(b, k).binary_search(&q).is_ok()
    }

    /// Human-readable dump: lengths and index lists per camera.
    pub fn debug_dump(&self, camera_names: &[String]) -> serde_json::Value {
        let cameras: Vec<serde_json::Value> = (0..self.batch * self.n_cam)
            .map(|bk| {
                let (b, k) = (bk / self.n_cam, bk % self.n_cam);
                serde_json::json!({
                    "batch": b,
                    "camera": k,
                    "name": camera_names.get(k).cloned().unwrap_or_else(|| format!("cam{k}")),
                    "length": self.sets[bk].len(),
                    "indices": self.sets[bk],
                })
            })
            .collect();
        serde_json::json!({ "l_max": self.l_max, "cameras": cameras })
    }
}

/// `I_k^(b) = { q | sum_d mask[b,k,q,d] > 0 }`, ascending.
pub fn extract_visible(mask: &BevMask) -> VisibleIndexSets {
    let (batch, n_cam, n_bev, _) = mask.dims();
    let mut sets = Vec::with_capacity(batch * n_cam);
    for b in 0..batch {
        for k in 0..n_cam {
            let set: Vec<usize> = (0..n_bev)
                .filter(|&q| mask.visible.slice(s![b, k, q, ..]).iter().any(|v| *v))
                .collect();
            sets.push(set);
        }
    }
    let l_max = sets.iter().map(Vec::len).max().unwrap_or(0);
    VisibleIndexSets {
        batch,
        n_cam,
        sets,
        l_max,
    }
}

/// Padded per-camera tensors of visible queries and their projected points.
#[derive(Clone, Debug, PartialEq)]
pub struct RebatchedQueries {
    /// `[B, N_cam, L_max, d]`
    pub bev_prime: Array4<f64>,
    /// `[B, N_cam, L_max, D, 2]`
    pub ref2d_prime: Array5<f64>,
    /// `[B, N_cam]` valid prefix length of each slice.
    pub lengths: Array2<usize>,
}

impl RebatchedQueries {
    pub fn l_max(&self) -> usize {
        self.bev_prime.shape()[2]
    }

    pub fn embed_dim(&self) -> usize {
        self.bev_prime.shape()[3]
    }

    pub fn z_samples(&self) -> usize {
        self.ref2d_prime.shape()[3]
    }
}

fn check_indices(idx: &VisibleIndexSets, n_bev: usize) -> Result<()> {
    for (bk, set) in idx.sets.iter().enumerate() {
        let (batch, camera) = (bk / idx.n_cam, bk % idx.n_cam);
        let mut prev: Option<usize> = None;
        for &index in set {
            if index >= n_bev {
                return Err(RebatchError::IndexOutOfRange {
                    batch,
                    camera,
                    index,
                    n_bev,
                });
            }
            if prev.is_some_and(|p| p >= index) {
                return Err(RebatchError::DuplicateIndex {
                    batch,
                    camera,
                    index,
                });
            }
            prev = Some(index);
        }
    }
    Ok(())
}

/// Gather the visible queries of each camera into padded tensors.
///
/// `queries` is `[B, N_BEV, d]`.
pub fn rebatch(
    queries: &Array3<f64>,
    ref2d: &ProjectedPoints2D,
    idx: &VisibleIndexSets,
) -> Result<RebatchedQueries> {
    let (batch, n_bev, dim) = queries.dim();
    let (rb, rk, rq, depth, _) = ref2d.coords.dim();
    if (rb, rq) != (batch, n_bev) || (idx.batch, idx.n_cam) != (batch, rk) {
        return Err(RebatchError::Shape(format!(
            "queries [{batch}, {n_bev}, {dim}], projections {:?}, index sets [{}, {}]",
            ref2d.coords.shape(),
            idx.batch,
            idx.n_cam
        )));
    }
    if idx.sets.len() != batch * rk {
        return Err(RebatchError::Shape(format!(
            "expected {} index sets, got {}",
            batch * rk,
            idx.sets.len()
        )));
    }
    check_indices(idx, n_bev)?;
    let n_cam = rk;
    let l_max = idx.l_max;
    let mut bev_prime = Array4::zeros((batch, n_cam, l_max, dim));
    let mut ref2d_prime = Array5::zeros((batch, n_cam, l_max, depth, 2));
    let mut lengths = Array2::zeros((batch, n_cam));
    for b in 0..batch {
        for k in 0..n_cam {
            let set = idx.set(b, k);
            if set.len() > l_max {
                return Err(RebatchError::Shape(format!(
                    "set ({b}, {k}) has {} entries but l_max is {l_max}",
                    set.len()
                )));
            }
            lengths[[b, k]] = set.len();
            for (l, &q) in set.iter().enumerate() {
                bev_prime
                    .slice_mut(s![b, k, l, ..])
                    .assign(&queries.slice(s![b, q, ..]));
                ref2d_prime
                    .slice_mut(s![b, k, l, .., ..])
                    .assign(&ref2d.coords.slice(s![b, k, q, .., ..]));
            }
        }
    }
    Ok(RebatchedQueries {
        bev_prime,
        ref2d_prime,
        lengths,
    })
}

/// Inverse of [`rebatch`]: `[B, N_cam, N_BEV, d]`, zero where not visible.
pub fn scatter_back(
    rb: &RebatchedQueries,
    idx: &VisibleIndexSets,
    n_bev: usize,
) -> Result<Array4<f64>> {
    let (batch, n_cam, l_max, dim) = rb.bev_prime.dim();
    if (idx.batch, idx.n_cam) != (batch, n_cam) || idx.sets.len() != batch * n_cam {
        return Err(RebatchError::Shape(format!(
            "rebatched [{batch}, {n_cam}] vs index sets [{}, {}]",
            idx.batch, idx.n_cam
        )));
    }
    check_indices(idx, n_bev)?;
    let mut out = Array4::zeros((batch, n_cam, n_bev, dim));
    for b in 0..batch {
        for k in 0..n_cam {
            let set = idx.set(b, k);
            if set.len() > l_max || set.len() != rb.lengths[[b, k]] {
                return Err(RebatchError::Shape(format!(
                    "set ({b}, {k}) has {} entries, rebatched length {} (l_max {l_max})",
                    set.len(),
                    rb.lengths[[b, k]]
                )));
            }
            for (l, &q) in set.iter().enumerate() {
                out.slice_mut(s![b, k, q, ..])
                    .assign(&rb.bev_prime.slice(s![b, k, l, ..]));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn mask_from(batch: usize, n_cam: usize, n_bev: usize, depth: usize, on: &[(usize, usize, usize, usize)]) -> BevMask {
        let mut visible = Array4::from_elem((batch, n_cam, n_bev, depth), false);
        for &(b, k, q, d) in on {
            visible[[b, k, q, d]] = true;
        }
        BevMask { visible }
    }

    fn projections(batch: usize, n_cam: usize, n_bev: usize, depth: usize) -> ProjectedPoints2D {
        ProjectedPoints2D {
            coords: Array5::from_shape_fn((batch, n_cam, n_bev, depth, 2), |(b, k, q, d, c)| {
                (b * 10000 + k * 1000 + q * 10 + d) as f64 + 0.5 * c as f64
            }),
            depth: Array4::from_elem((batch, n_cam, n_bev, depth), 1.0),
        }
    }

    #[test]
    fn all_zero_mask_gives_empty_sets() {
        let idx = extract_visible(&mask_from(2, 3, 5, 2, &[]));
        assert_eq!(idx.l_max, 0);
        assert!(idx.sets.iter().all(Vec::is_empty));
    }

    #[test]
    fn camera_sees_three_and_seven() {
        let mask = mask_from(1, 2, 10, 3, &[(0, 0, 7, 2), (0, 0, 3, 0), (0, 0, 3, 1), (0, 1, 9, 0)]);
        let idx = extract_visible(&mask);
        assert_eq!(idx.set(0, 0), &[3, 7]);
        assert_eq!(idx.set(0, 1), &[9]);
        assert_eq!(idx.l_max, 2);
        assert!(idx.contains(0, 0, 7) && !idx.contains(0, 1, 7));
    }

    #[test]
    fn empty_sets_rebatch_to_empty_axis() {
        let mask = mask_from(1, 2, 4, 1, &[]);
        let idx = extract_visible(&mask);
        let queries = Array3::from_elem((1, 4, 3), 1.0);
        let rb = rebatch(&queries, &projections(1, 2, 4, 1), &idx).unwrap();
        assert_eq!(rb.bev_prime.shape(), &[1, 2, 0, 3]);
        assert_eq!(rb.ref2d_prime.shape(), &[1, 2, 0, 1, 2]);
        let back = scatter_back(&rb, &idx, 4).unwrap();
        assert!(back.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_visible_query_is_copied_bit_for_bit() {
        let mask = mask_from(1, 1, 6, 2, &[(0, 0, 4, 1)]);
        let idx = extract_visible(&mask);
        let queries = Array3::from_shape_fn((1, 6, 3), |(_, q, c)| {
            f64::from_bits(0x3ff0_0000_0000_0001 + (q * 3 + c) as u64)
        });
        let proj = projections(1, 1, 6, 2);
        let rb = rebatch(&queries, &proj, &idx).unwrap();
        for c in 0..3 {
            assert_eq!(rb.bev_prime[[0, 0, 0, c]].to_bits(), queries[[0, 4, c]].to_bits());
        }
        assert_eq!(rb.ref2d_prime[[0, 0, 0, 1, 0]], proj.coords[[0, 0, 4, 1, 0]]);
        assert_eq!(rb.lengths[[0, 0]], 1);
    }

    #[test]
    fn out_of_range_and_duplicate_indices_are_rejected() {
        let queries = Array3::zeros((1, 3, 2));
        let proj = projections(1, 1, 3, 1);
        let bad = VisibleIndexSets {
            batch: 1,
            n_cam: 1,
            sets: vec![vec![0, 5]],
            l_max: 2,
        };
        assert!(matches!(
            rebatch(&queries, &proj, &bad),
            Err(RebatchError::IndexOutOfRange { index: 5, .. })
        ));
        let dup = VisibleIndexSets {
            batch: 1,
            n_cam: 1,
            sets: vec![vec![1, 1]],
            l_max: 2,
        };
        let rb = RebatchedQueries {
            bev_prime: Array4::zeros((1, 1, 2, 2)),
            ref2d_prime: Array5::zeros((1, 1, 2, 1, 2)),
            lengths: Array2::from_elem((1, 1), 2),
        };
        assert!(matches!(
            scatter_back(&rb, &dup, 3),
            Err(RebatchError::DuplicateIndex { index: 1, .. })
        ));
    }

    #[test]
    fn debug_dump_lists_lengths() {
        let idx = extract_visible(&mask_from(1, 2, 5, 1, &[(0, 1, 2, 0), (0, 1, 4, 0)]));
        let dump = idx.debug_dump(&["front".to_string(), "back".to_string()]);
        assert_eq!(dump["l_max"], 2);
        assert_eq!(dump["cameras"][1]["name"], "back");
        assert_eq!(dump["cameras"][1]["indices"], serde_json::json!([2, 4]));
        assert_eq!(dump["cameras"][0]["length"], 0);
    }
}
