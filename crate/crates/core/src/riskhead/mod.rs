//! Risk prediction head.
//!
//! Perspective-view (PV) risk queries are matched to the rebatched BEV
//! reference points of their camera, then aggregate BEV features with
//! deformable attention over every camera that sees the matched BEV pillar:
//!
//! ```text
//! RHA(q) = 1/|V_hit| * sum_{i in V_hit} sum_{j < N_ref} DeformAttn(q, ref_j, BEV'_i)
//! ```
//!
//! `BEV'_i` is camera `i`'s rebatched feature list scattered back onto the
//! BEV lattice (zeros where the camera sees nothing); `ref_j` is the BEV
//! cell center of the `j`-th nearest rebatched candidate; `V_hit` is the set
//! of cameras whose visible set contains the nearest candidate's BEV query.
//! Queries without any candidate pass through unchanged.

mod attention;
mod decode;
pub mod gradcheck;
mod matching;
mod sampling;

use std::path::Path;

use ndarray::{s, Array3, Array4, Array5};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use attention::{
    deform_attn, deform_attn_backward, deform_attn_projected, softmax, DeformAttnParams, DeformForward,
    DeformGrads, Linear, DEFAULT_OFFSET_SCALE,
};
pub use decode::{logistic, risk_decode, RiskDecoder, RiskObject, RiskPrediction, DEFAULT_RISK_THRESHOLD};
pub use matching::{nearest_candidates, nn_match, NnMatches};
pub use sampling::{bilinear_sample, bilinear_sample_loc_vjp, bilinear_taps, FeatureMap, Tap, Taps};

use crate::geometry::BevGrid;
use crate::io::{IoError, TensorBundle};
use crate::rebatch::{scatter_back, RebatchError, RebatchedQueries, VisibleIndexSets};

#[derive(Debug, Error)]
pub enum RiskHeadError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Rebatch(#[from] RebatchError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid parameter file: {0}")]
    Params(String),
}

pub type Result<T> = std::result::Result<T, RiskHeadError>;

pub const DEFAULT_PV_VIEWS: usize = 6;
pub const DEFAULT_PV_HEIGHT: usize = 80;
pub const DEFAULT_PV_WIDTH: usize = 45;

/// Learnable per-view PV risk queries, `[views, height, width, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PvQueryGrid {
    pub queries: Array4<f64>,
}

impl PvQueryGrid {
    pub fn zeros(views: usize, height: usize, width: usize, dim: usize) -> Self {
        Self {
            queries: Array4::zeros((views, height, width, dim)),
        }
    }

    pub fn random(views: usize, height: usize, width: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            queries: Array4::from_shape_fn((views, height, width, dim), |_| rng.random_range(-scale..scale)),
        }
    }

    pub fn views(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.queries.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.queries.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.queries.shape()[3]
    }

    /// Normalized image position of PV cell `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) / self.width() as f64,
            (row as f64 + 0.5) / self.height() as f64,
        )
    }

    /// Pixel centers replicated over the batch, `[B, views, H*W, 2]`.
    pub fn camera_reference(&self, batch: usize) -> Array4<f64> {
        let (h, w) = (self.height(), self.width());
        Array4::from_shape_fn((batch, self.views(), h * w, 2), |(_, _, q, c)| {
            let (x, y) = self.pixel_center(q / w, q % w);
            if c == 0 {
                x
            } else {
                y
            }
        })
    }
}

/// Everything the head needs beyond its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskHeadParams {
    pub attn: DeformAttnParams,
    pub decoder: RiskDecoder,
    pub pv: PvQueryGrid,
    /// Reference points per PV query (nearest candidates used).
    pub n_ref: usize,
}

impl RiskHeadParams {
    pub fn to_bundle(&self) -> TensorBundle {
        let a = &self.attn;
        let mut bundle = TensorBundle::new();
        bundle.set_meta("n_heads", a.n_heads.into());
        bundle.set_meta("n_points", a.n_points.into());
        bundle.set_meta("dim", a.dim.into());
        bundle.set_meta("n_ref", self.n_ref.into());
        bundle.set_meta("offset_scale", a.offset_scale.into());
        bundle.set_meta("threshold", self.decoder.threshold.into());
        for (name, lin) in [
            ("offset_net", &a.offset_net),
            ("weight_net", &a.weight_net),
            ("value_proj", &a.value_proj),
            ("output_proj", &a.output_proj),
        ] {
            bundle.push(&format!("{name}.weight"), lin.weight.shape(), lin.weight.iter().copied());
            bundle.push(&format!("{name}.bias"), lin.bias.shape(), lin.bias.iter().copied());
        }
        bundle.push("decoder.weight", &[self.decoder.weight.len()], self.decoder.weight.iter().copied());
        bundle.push("decoder.bias", &[1], [self.decoder.bias]);
        bundle.push("pv_queries", self.pv.queries.shape(), self.pv.queries.iter().copied());
        bundle
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let meta_usize = |k: &str| {
            bundle
                .meta(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| RiskHeadError::Params(format!("missing integer meta `{k}`")))
        };
        let meta_f64 = |k: &str| {
            bundle
                .meta(k)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| RiskHeadError::Params(format!("missing real meta `{k}`")))
        };
        let (n_heads, n_points, dim) = (meta_usize("n_heads")?, meta_usize("n_points")?, meta_usize("dim")?);
        if n_heads == 0 || n_points == 0 || dim % n_heads != 0 {
            return Err(RiskHeadError::Params(format!(
                "bad attention shape: dim {dim}, heads {n_heads}, points {n_points}"
            )));
        }
        let mut attn = DeformAttnParams::new(dim, n_heads, n_points);
        attn.offset_scale = meta_f64("offset_scale")?;
        let load = |name: &str, expect: &[usize]| -> Result<Vec<f64>> {
            let (shape, values) = bundle.get(name)?;
            if shape != expect {
                return Err(RiskHeadError::Params(format!(
                    "`{name}` has shape {shape:?}, expected {expect:?}"
                )));
            }
            Ok(values.to_vec())
        };
        for (name, lin) in [
            ("offset_net", &mut attn.offset_net),
            ("weight_net", &mut attn.weight_net),
            ("value_proj", &mut attn.value_proj),
            ("output_proj", &mut attn.output_proj),
        ] {
            let w = load(&format!("{name}.weight"), &[lin.out_dim(), lin.in_dim()])?;
            let b = load(&format!("{name}.bias"), &[lin.out_dim()])?;
            lin.weight = ndarray::Array2::from_shape_vec((lin.out_dim(), lin.in_dim()), w).expect("checked shape");
            lin.bias = ndarray::Array1::from(b);
        }
        let decoder = RiskDecoder {
            weight: load("decoder.weight", &[dim])?,
            bias: load("decoder.bias", &[1])?[0],
            threshold: meta_f64("threshold")?,
        };
        let (shape, values) = bundle.get("pv_queries")?;
        if shape.len() != 4 || shape[3] != dim {
            return Err(RiskHeadError::Params(format!("pv_queries has shape {shape:?}")));
        }
        let pv = PvQueryGrid {
            queries: Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values.to_vec())
                .expect("checked shape"),
        };
        Ok(Self {
            attn,
            decoder,
            pv,
            n_ref: meta_usize("n_ref")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_bundle().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&TensorBundle::read(path)?)
    }
}

/// PV risk features `[B, views, H, W, d]` plus per-query bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct RhaOutput {
    pub features: Array5<f64>,
    /// `|V_hit|` per PV query, `[B, views, H, W]`; 0 means passed through.
    pub hits: Array4<usize>,
}

/// One PV query's resolved references: BEV reference points and hit cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryReferences {
    pub references: Vec<(f64, f64)>,
    pub hit_views: Vec<usize>,
}

/// Resolve the reference points and hit views of a PV query located at
/// `point` in view `view`. `None` when the view has no visible BEV queries.
pub fn resolve_references(
    rb: &RebatchedQueries,
    idx: &VisibleIndexSets,
    grid: &BevGrid,
    b: usize,
    view: usize,
    point: (f64, f64),
    n_ref: usize,
) -> Option<QueryReferences> {
    let candidates = nearest_candidates(rb, b, view, point, n_ref.max(1));
    let set = idx.set(b, view);
    let anchor = set[candidates.first()?.0];
    let references = candidates.iter().take(n_ref).map(|&(l, _)| grid.cell_center(set[l])).collect();
    let hit_views = (0..idx.n_cam).filter(|&i| idx.contains(b, i, anchor)).collect();
    Some(QueryReferences {
        references,
        hit_views,
    })
}

/// Aggregate rebatched BEV features into PV risk features.
pub fn rha_forward(
    pv: &PvQueryGrid,
    rb: &RebatchedQueries,
    idx: &VisibleIndexSets,
    grid: &BevGrid,
    params: &DeformAttnParams,
    n_ref: usize,
) -> Result<RhaOutput> {
    let (batch, n_cam, _, dim) = rb.bev_prime.dim();
    if pv.views() != n_cam || pv.dim() != dim || params.dim != dim {
        return Err(RiskHeadError::Shape(format!(
            "pv grid {:?}, rebatched {:?}, attention dim {}",
            pv.queries.shape(),
            rb.bev_prime.shape(),
            params.dim
        )));
    }
    let n_bev = grid.n_bev();
    let scattered = scatter_back(rb, idx, n_bev)?;
    let (h, w) = (pv.height(), pv.width());
    let mut features = Array5::zeros((batch, n_cam, h, w, dim));
    let mut hits = Array4::zeros((batch, n_cam, h, w));

    for b in 0..batch {
        let lattices: Vec<FeatureMap> = (0..n_cam)
            .into_par_iter()
            .map(|k| {
                let raw = scattered
                    .slice(s![b, k, .., ..])
                    .to_owned()
                    .into_shape_with_order((grid.rows, grid.cols, dim))
                    .expect("lattice shape");
                params.project_values(&FeatureMap::new(raw))
            })
            .collect();

        let rows: Vec<(Vec<f64>, usize)> = (0..n_cam * h * w)
            .into_par_iter()
            .map(|i| {
                let (v, pix) = (i / (h * w), i % (h * w));
                let (r, c) = (pix / w, pix % w);
                let q = pv.queries.slice(s![v, r, c, ..]).to_vec();
                match resolve_references(rb, idx, grid, b, v, pv.pixel_center(r, c), n_ref) {
                    None => (q, 0),
                    Some(refs) => {
                        let mut acc = vec![0.0; dim];
                        for &cam in &refs.hit_views {
                            for &reference in &refs.references {
                                let out = deform_attn_projected(&q, reference, &lattices[cam], params).output;
                                for (a, o) in acc.iter_mut().zip(out) {
                                    *a += o;
                                }
                            }
                        }
                        let n_hit = refs.hit_views.len();
                        acc.iter_mut().for_each(|a| *a /= n_hit as f64);
                        (acc, n_hit)
                    }
                }
            })
            .collect();

        for (i, (f, n_hit)) in rows.into_iter().enumerate() {
            let (v, pix) = (i / (h * w), i % (h * w));
            let (r, c) = (pix / w, pix % w);
            features.slice_mut(s![b, v, r, c, ..]).assign(&ndarray::Array1::from(f));
            hits[[b, v, r, c]] = n_hit;
        }
    }
    Ok(RhaOutput { features, hits })
}

/// Risk maps for one batch element of the head's output.
pub fn decode_batch(out: &RhaOutput, b: usize, head: &RiskDecoder) -> RiskPrediction {
    risk_decode(out.features.slice(s![b, .., .., .., ..]), head)
}

/// Zero-padded lattice of one camera, for diagnostics.
pub fn camera_lattice(scattered: &Array4<f64>, b: usize, k: usize, grid: &BevGrid) -> Array3<f64> {
    let dim = scattered.shape()[3];
    scattered
        .slice(s![b, k, .., ..])
        .to_owned()
        .into_shape_with_order((grid.rows, grid.cols, dim))
        .expect("lattice shape")
}
