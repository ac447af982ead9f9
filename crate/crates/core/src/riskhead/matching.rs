use ndarray::{s, Array3, Array4};

use crate::rebatch::RebatchedQueries;

/// Nearest rebatched candidate for every camera-space query.
#[derive(Clone, Debug, PartialEq)]
pub struct NnMatches {
    /// `[B, N_cam, Q]`; `None` when the camera has no visible BEV queries.
    pub index: Array3<Option<usize>>,
    /// Distance to the matched candidate, `f64::INFINITY` when unmatched.
    pub distance: Array3<f64>,
}

/// The `n` closest valid candidates of slice `(b, k)`, ordered by distance and
/// then by index (the smallest index wins ties). A candidate's distance is the
/// minimum over its pillar's height samples.
pub fn nearest_candidates(
    rb: &RebatchedQueries,
    b: usize,
    k: usize,
    point: (f64, f64),
    n: usize,
) -> Vec<(usize, f64)> {
    let len = rb.lengths[[b, k]];
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(n + 1);
    if n == 0 || len == 0 {
        return best;
    }
    let depth = rb.z_samples();
    let slice = rb.ref2d_prime.slice(s![b, k, ..len, .., ..]);
    let owned;
    let flat = match slice.as_slice() {
        Some(f) => f,
        None => {
            owned = slice.to_owned();
            owned.as_slice().expect("owned arrays are contiguous")
        }
    };
    for (l, pillar) in flat.chunks_exact(depth * 2).enumerate() {
        // sqrt is monotone, so taking it after the min is exact
        let mut sq = f64::INFINITY;
        for xy in pillar.chunks_exact(2) {
            let (dx, dy) = (point.0 - xy[0], point.1 - xy[1]);
            sq = sq.min(dx * dx + dy * dy);
        }
        let dist = sq.sqrt();
        if best.len() == n && dist >= best[n - 1].1 {
            continue;
        }
        // strict comparison keeps earlier (smaller) indices ahead on ties
        let at = best.partition_point(|&(_, d)| d <= dist);
        best.insert(at, (l, dist));
        best.truncate(n);
    }
    best
}

/// Match every query in `ref_cam` (`[B, N_cam, Q, 2]`) to its nearest rebatched
/// reference point of the same camera.
pub fn nn_match(ref_cam: &Array4<f64>, rb: &RebatchedQueries) -> NnMatches {
    let (batch, n_cam, n_q, _) = ref_cam.dim();
    let mut index = Array3::from_elem((batch, n_cam, n_q), None);
    let mut distance = Array3::from_elem((batch, n_cam, n_q), f64::INFINITY);
    for b in 0..batch {
        for k in 0..n_cam {
            for q in 0..n_q {
                let point = (ref_cam[[b, k, q, 0]], ref_cam[[b, k, q, 1]]);
                if let Some(&(l, d)) = nearest_candidates(rb, b, k, point, 1).first() {
                    index[[b, k, q]] = Some(l);
                    distance[[b, k, q]] = d;
                }
            }
        }
    }
    NnMatches { index, distance }
}
