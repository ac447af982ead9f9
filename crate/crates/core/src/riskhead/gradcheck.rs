//! Central-difference verification of analytic gradients.
//!
//! The relative error of one Jacobian entry is
//! `|analytic - numeric| / max(1, |analytic|, |numeric|)`, i.e. absolute for
//! entries below one and relative above.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::attention::{deform_attn, deform_attn_backward, DeformAttnParams};
use super::sampling::{bilinear_sample, bilinear_sample_loc_vjp, FeatureMap};

pub const DEFAULT_STEP: f64 = 1e-5;

/// An operation `R^n -> R^m` with a vector-Jacobian product.
pub trait Differentiable {
    fn forward(&self, x: &[f64]) -> Vec<f64>;
    fn vjp(&self, x: &[f64], grad_out: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Error, PartialEq)]
pub enum GradcheckError {
    #[error("non-finite {which} gradient at output {output}, input {input}")]
    NonFinite {
        which: &'static str,
        output: usize,
        input: usize,
    },
    #[error("operation has no inputs or outputs")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(output, input)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compare the full analytic Jacobian (rows from `vjp` with basis vectors)
/// against central differences with the given step.
pub fn gradcheck(op: &dyn Differentiable, x: &[f64], step: f64) -> Result<GradcheckReport, GradcheckError> {
    let n_out = op.forward(x).len();
    if n_out == 0 || x.is_empty() {
        return Err(GradcheckError::Empty);
    }
    let mut numeric = vec![vec![0.0; x.len()]; n_out];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let plus = op.forward(&xp);
        xp[i] = x[i] - step;
        let minus = op.forward(&xp);
        xp[i] = x[i];
        for o in 0..n_out {
            numeric[o][i] = (plus[o] - minus[o]) / (2.0 * step);
        }
    }
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut basis = vec![0.0; n_out];
    for o in 0..n_out {
        basis[o] = 1.0;
        let row = op.vjp(x, &basis);
        basis[o] = 0.0;
        for i in 0..x.len() {
            let (a, n) = (row[i], numeric[o][i]);
            if !a.is_finite() {
                return Err(GradcheckError::NonFinite {
                    which: "analytic",
                    output: o,
                    input: i,
                });
            }
            if !n.is_finite() {
                return Err(GradcheckError::NonFinite {
                    which: "numeric",
                    output: o,
                    input: i,
                });
            }
            let err = relative_error(a, n);
            if err > report.max_rel_error || (o, i) == (0, 0) {
                report = GradcheckReport {
                    max_rel_error: err.max(report.max_rel_error),
                    worst: (o, i),
                    analytic: a,
                    numeric: n,
                };
            }
        }
    }
    Ok(report)
}

/// `y = W x + b`.
pub struct LinearOp {
    pub linear: super::attention::Linear,
}

impl Differentiable for LinearOp {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.linear.apply(x)
    }

    fn vjp(&self, _x: &[f64], g: &[f64]) -> Vec<f64> {
        (0..self.linear.in_dim())
            .map(|c| (0..self.linear.out_dim()).map(|r| self.linear.weight[[r, c]] * g[r]).sum())
            .collect()
    }
}

/// `bilinear_sample(map, loc)` as a function of the 2-vector `loc`.
pub struct BilinearLocOp<'a> {
    pub map: &'a FeatureMap,
}

impl Differentiable for BilinearLocOp<'_> {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        bilinear_sample(self.map, (x[0], x[1]))
    }

    fn vjp(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let (gx, gy) = bilinear_sample_loc_vjp(self.map, (x[0], x[1]), g);
        vec![gx, gy]
    }
}

/// `deform_attn` as a function of the query vector.
pub struct DeformQueryOp<'a> {
    pub reference: (f64, f64),
    pub values: &'a FeatureMap,
    pub params: &'a DeformAttnParams,
}

impl Differentiable for DeformQueryOp<'_> {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        deform_attn(x, self.reference, self.values, self.params)
    }

    fn vjp(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        deform_attn_backward(x, self.reference, self.values, self.params, g).query
    }
}

/// `deform_attn` as a function of all trainable parameters (flattened).
pub struct DeformParamsOp<'a> {
    pub query: &'a [f64],
    pub reference: (f64, f64),
    pub values: &'a FeatureMap,
    pub template: &'a DeformAttnParams,
}

impl Differentiable for DeformParamsOp<'_> {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        deform_attn(self.query, self.reference, self.values, &self.template.with_flat(x))
    }

    fn vjp(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let params = self.template.with_flat(x);
        deform_attn_backward(self.query, self.reference, self.values, &params, g)
            .params
            .to_flat()
    }
}

/// `deform_attn` as a function of the value map (flattened `[h, w, d]`).
pub struct DeformValuesOp<'a> {
    pub query: &'a [f64],
    pub reference: (f64, f64),
    pub shape: (usize, usize, usize),
    pub params: &'a DeformAttnParams,
}

impl DeformValuesOp<'_> {
    fn map(&self, x: &[f64]) -> FeatureMap {
        let (h, w, d) = self.shape;
        FeatureMap::new(ndarray::Array3::from_shape_vec((h, w, d), x.to_vec()).expect("value shape"))
    }
}

impl Differentiable for DeformValuesOp<'_> {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        deform_attn(self.query, self.reference, &self.map(x), self.params)
    }

    fn vjp(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        deform_attn_backward(self.query, self.reference, &self.map(x), self.params, g)
            .values
            .array()
            .iter()
            .copied()
            .collect()
    }
}

/// `deform_attn` as a function of the 2D reference point.
pub struct DeformReferenceOp<'a> {
    pub query: &'a [f64],
    pub values: &'a FeatureMap,
    pub params: &'a DeformAttnParams,
}

impl Differentiable for DeformReferenceOp<'_> {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        deform_attn(self.query, (x[0], x[1]), self.values, self.params)
    }

    fn vjp(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let r = deform_attn_backward(self.query, (x[0], x[1]), self.values, self.params, g).reference;
        vec![r.0, r.1]
    }
}

/// True when `loc` is at least `margin` pixels away from every bilinear kink
/// (integer continuous pixel positions) of an `h x w` map.
pub fn away_from_kinks(height: usize, width: usize, loc: (f64, f64), margin: f64) -> bool {
    let frac_ok = |p: f64| {
        let f = p - p.floor();
        f > margin && f < 1.0 - margin
    };
    frac_ok(loc.0 * width as f64 - 0.5) && frac_ok(loc.1 * height as f64 - 0.5)
}

/// Which operation a suite run checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteOp {
    Bilinear,
    Deform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub op: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
}

const KINK_MARGIN: f64 = 1e-3;

fn random_map(h: usize, w: usize, d: usize, rng: &mut impl Rng) -> FeatureMap {
    FeatureMap::from_fn(h, w, d, |_| rng.random_range(-1.0..1.0))
}

fn interior_loc(h: usize, w: usize, rng: &mut impl Rng) -> (f64, f64) {
    loop {
        let loc = (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95));
        if away_from_kinks(h, w, loc, KINK_MARGIN) {
            return loc;
        }
    }
}

/// Gradient checks at `points` random interior points. Bilinear sampling is
/// checked w.r.t. the location; deformable attention w.r.t. the query, the
/// reference point, the value map and every parameter, reporting the worst.
pub fn run_suite(op: SuiteOp, points: usize, seed: u64) -> Result<SuiteResult, GradcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    match op {
        SuiteOp::Bilinear => {
            for _ in 0..points {
                let map = random_map(7, 9, 3, &mut rng);
                let loc = interior_loc(7, 9, &mut rng);
                let r = gradcheck(&BilinearLocOp { map: &map }, &[loc.0, loc.1], DEFAULT_STEP)?;
                worst = worst.max(r.max_rel_error);
            }
            Ok(SuiteResult {
                op: "bilinear",
                points,
                max_rel_error: worst,
            })
        }
        SuiteOp::Deform => {
            let (h, w, d) = (6, 7, 8);
            let mut done = 0;
            while done < points {
                let params = DeformAttnParams::random(d, 2, 3, &mut rng);
                let values = random_map(h, w, d, &mut rng);
                let query: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let reference = interior_loc(h, w, &mut rng);
                let smooth = params
                    .sampling_offsets(&query)
                    .iter()
                    .all(|o| away_from_kinks(h, w, (reference.0 + o.0, reference.1 + o.1), KINK_MARGIN));
                if !smooth {
                    continue;
                }
                let checks = [
                    gradcheck(&DeformQueryOp { reference, values: &values, params: &params }, &query, DEFAULT_STEP)?,
                    gradcheck(
                        &DeformReferenceOp { query: &query, values: &values, params: &params },
                        &[reference.0, reference.1],
                        DEFAULT_STEP,
                    )?,
                    gradcheck(
                        &DeformValuesOp { query: &query, reference, shape: (h, w, d), params: &params },
                        values.array().as_slice().expect("standard layout"),
                        DEFAULT_STEP,
                    )?,
                    gradcheck(
                        &DeformParamsOp { query: &query, reference, values: &values, template: &params },
                        &params.to_flat(),
                        DEFAULT_STEP,
                    )?,
                ];
                for c in checks {
                    worst = worst.max(c.max_rel_error);
                }
                done += 1;
            }
            Ok(SuiteResult {
                op: "deform",
                points,
                max_rel_error: worst,
            })
        }
    }
}
