//! Single-scale deformable attention with a hand-written backward pass.
//!
//! For a query `q` and a reference point `ref` (normalized map coordinates):
//!
//! ```text
//! offsets[h, j] = offset_scale * offset_net(q)[h, j, :]
//! weights[h, :] = softmax(weight_net(q)[h, :])
//! head_h        = sum_j weights[h, j] * sample(value_proj(values)[.., h], ref + offsets[h, j])
//! out           = output_proj(concat_h head_h)
//! ```

use ndarray::{Array1, Array2};
use rand::Rng;

use super::sampling::{sample_channels_into, sample_loc_vjp, sample_map_vjp, FeatureMap};

/// Dense affine map `y = W x + b`, `W` is `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn random(out_dim: usize, in_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-scale..scale)),
            bias: Array1::from_shape_fn(out_dim, |_| rng.random_range(-scale..scale)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.to_vec();
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += self.weight.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        y
    }

    /// Accumulate parameter gradients for upstream `gy`; returns `W^T gy`.
    fn backward(&self, x: &[f64], gy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim()];
        for (r, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[r] += g;
            for (c, &v) in x.iter().enumerate() {
                grad.weight[[r, c]] += g * v;
                gx[c] += self.weight[[r, c]] * g;
            }
        }
        gx
    }

    fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.weight.iter());
        out.extend(self.bias.iter());
    }

    fn load_from(&mut self, values: &[f64]) -> usize {
        let nw = self.weight.len();
        for (w, v) in self.weight.iter_mut().zip(values) {
            *w = *v;
        }
        for (b, v) in self.bias.iter_mut().zip(&values[nw..]) {
            *b = *v;
        }
        self.n_params()
    }
}

/// Parameters of one deformable attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformAttnParams {
    pub n_heads: usize,
    pub n_points: usize,
    pub dim: usize,
    /// Multiplies the raw offset_net output (normalized units).
    pub offset_scale: f64,
    /// `dim -> n_heads * n_points * 2`, laid out `[h][j][x|y]`.
    pub offset_net: Linear,
    /// `dim -> n_heads * n_points`
    pub weight_net: Linear,
    pub value_proj: Linear,
    pub output_proj: Linear,
}

pub const DEFAULT_OFFSET_SCALE: f64 = 1.0 / 16.0;

impl DeformAttnParams {
    /// Initialization where the block reduces to plain bilinear sampling:
    /// zero offsets, uniform weights, identity projections.
    pub fn new(dim: usize, n_heads: usize, n_points: usize) -> Self {
        assert!(n_heads > 0 && n_points > 0, "need at least one head and point");
        assert!(dim.is_multiple_of(n_heads), "dim {dim} not divisible by {n_heads} heads");
        Self {
            n_heads,
            n_points,
            dim,
            offset_scale: DEFAULT_OFFSET_SCALE,
            offset_net: Linear::zeros(n_heads * n_points * 2, dim),
            weight_net: Linear::zeros(n_heads * n_points, dim),
            value_proj: Linear::identity(dim),
            output_proj: Linear::identity(dim),
        }
    }

    pub fn random(dim: usize, n_heads: usize, n_points: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::new(dim, n_heads, n_points);
        let s = 1.0 / (dim as f64).sqrt();
        p.offset_net = Linear::random(n_heads * n_points * 2, dim, s, rng);
        p.weight_net = Linear::random(n_heads * n_points, dim, s, rng);
        p.value_proj = Linear::random(dim, dim, s, rng);
        p.output_proj = Linear::random(dim, dim, s, rng);
        p
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// A zero-valued parameter set of the same shape (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let lin = |l: &Linear| Linear::zeros(l.out_dim(), l.in_dim());
        Self {
            offset_net: lin(&self.offset_net),
            weight_net: lin(&self.weight_net),
            value_proj: lin(&self.value_proj),
            output_proj: lin(&self.output_proj),
            ..*self
        }
    }

    fn linears(&self) -> [&Linear; 4] {
        [&self.offset_net, &self.weight_net, &self.value_proj, &self.output_proj]
    }

    fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [
            &mut self.offset_net,
            &mut self.weight_net,
            &mut self.value_proj,
            &mut self.output_proj,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.linears().iter().map(|l| l.n_params()).sum()
    }

    /// Trainable values in the order offset_net, weight_net, value_proj,
    /// output_proj (weight row-major, then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in self.linears() {
            l.flatten_into(&mut out);
        }
        out
    }

    pub fn with_flat(&self, values: &[f64]) -> Self {
        assert_eq!(values.len(), self.n_params(), "flat parameter length");
        let mut p = self.clone();
        let mut at = 0;
        for l in p.linears_mut() {
            at += l.load_from(&values[at..]);
        }
        p
    }

    /// Apply `value_proj` to every cell of a value map.
    pub fn project_values(&self, values: &FeatureMap) -> FeatureMap {
        let (h, w) = (values.height(), values.width());
        let mut out = FeatureMap::zeros(h, w, self.dim);
        for r in 0..h {
            for c in 0..w {
                let v = self.value_proj.apply(values.cell(r, c).as_slice().expect("contiguous"));
                out.array_mut()
                    .slice_mut(ndarray::s![r, c, ..])
                    .assign(&Array1::from(v));
            }
        }
        out
    }

    /// Softmax groups (one per head) of attention weights for query `q`.
    pub fn attention_weights(&self, q: &[f64]) -> Vec<f64> {
        let logits = self.weight_net.apply(q);
        let mut out = Vec::with_capacity(logits.len());
        for head in logits.chunks(self.n_points) {
            out.extend(softmax(head));
        }
        out
    }

    pub fn sampling_offsets(&self, q: &[f64]) -> Vec<(f64, f64)> {
        self.offset_net
            .apply(q)
            .chunks(2)
            .map(|o| (self.offset_scale * o[0], self.offset_scale * o[1]))
            .collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Intermediate values of one forward pass, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct DeformForward {
    pub output: Vec<f64>,
    pub offsets: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
    /// Per `(head, point)` sampled head-slice, `[n_heads * n_points][head_dim]`.
    pub samples: Vec<Vec<f64>>,
    /// Concatenated head outputs before `output_proj`.
    pub heads: Vec<f64>,
}

/// Forward pass on a value map already passed through `value_proj`.
pub fn deform_attn_projected(
    q: &[f64],
    reference: (f64, f64),
    projected: &FeatureMap,
    params: &DeformAttnParams,
) -> DeformForward {
    let hd = params.head_dim();
    let offsets = params.sampling_offsets(q);
    let weights = params.attention_weights(q);
    let mut samples = Vec::with_capacity(offsets.len());
    let mut heads = vec![0.0; params.dim];
    for h in 0..params.n_heads {
        for j in 0..params.n_points {
            let hj = h * params.n_points + j;
            let loc = (reference.0 + offsets[hj].0, reference.1 + offsets[hj].1);
            let mut s = vec![0.0; hd];
            sample_channels_into(projected, loc, h * hd, &mut s);
            for (acc, v) in heads[h * hd..(h + 1) * hd].iter_mut().zip(&s) {
                *acc += weights[hj] * v;
            }
            samples.push(s);
        }
    }
    let output = params.output_proj.apply(&heads);
    DeformForward {
        output,
        offsets,
        weights,
        samples,
        heads,
    }
}

/// Deformable attention of `q` around `reference` into the raw value map.
pub fn deform_attn(
    q: &[f64],
    reference: (f64, f64),
    values: &FeatureMap,
    params: &DeformAttnParams,
) -> Vec<f64> {
    deform_attn_projected(q, reference, &params.project_values(values), params).output
}

/// Gradients of `<grad_out, deform_attn(..)>`.
#[derive(Clone, Debug)]
pub struct DeformGrads {
    pub query: Vec<f64>,
    pub reference: (f64, f64),
    pub values: FeatureMap,
    pub params: DeformAttnParams,
}

pub fn deform_attn_backward(
    q: &[f64],
    reference: (f64, f64),
    values: &FeatureMap,
    params: &DeformAttnParams,
    grad_out: &[f64],
) -> DeformGrads {
    let projected = params.project_values(values);
    let fwd = deform_attn_projected(q, reference, &projected, params);
    let (hd, np) = (params.head_dim(), params.n_points);
    let mut grads = params.zeros_like();

    let g_heads = params.output_proj.backward(&fwd.heads, grad_out, &mut grads.output_proj);

    let mut g_logits = vec![0.0; params.n_heads * np];
    let mut g_offset_raw = vec![0.0; params.n_heads * np * 2];
    let mut g_projected = FeatureMap::zeros(projected.height(), projected.width(), params.dim);
    let mut g_ref = (0.0, 0.0);
    for h in 0..params.n_heads {
        let gh = &g_heads[h * hd..(h + 1) * hd];
        let mut g_w = vec![0.0; np];
        for j in 0..np {
            let hj = h * np + j;
            g_w[j] = gh.iter().zip(&fwd.samples[hj]).map(|(a, b)| a * b).sum();
            let g_sample: Vec<f64> = gh.iter().map(|g| fwd.weights[hj] * g).collect();
            let loc = (reference.0 + fwd.offsets[hj].0, reference.1 + fwd.offsets[hj].1);
            let (gx, gy) = sample_loc_vjp(&projected, loc, h * hd, &g_sample);
            g_ref.0 += gx;
            g_ref.1 += gy;
            g_offset_raw[2 * hj] = params.offset_scale * gx;
            g_offset_raw[2 * hj + 1] = params.offset_scale * gy;
            sample_map_vjp(&mut g_projected, loc, h * hd, &g_sample);
        }
        // softmax backward within the head's group
        let a = &fwd.weights[h * np..(h + 1) * np];
        let dot: f64 = a.iter().zip(&g_w).map(|(x, y)| x * y).sum();
        for j in 0..np {
            g_logits[h * np + j] = a[j] * (g_w[j] - dot);
        }
    }

    let mut g_query = params.offset_net.backward(q, &g_offset_raw, &mut grads.offset_net);
    let g_q2 = params.weight_net.backward(q, &g_logits, &mut grads.weight_net);
    for (a, b) in g_query.iter_mut().zip(g_q2) {
        *a += b;
    }

    let mut g_values = FeatureMap::zeros(values.height(), values.width(), values.dim());
    for r in 0..values.height() {
        for c in 0..values.width() {
            let gv = g_projected.cell(r, c).to_vec();
            if gv.iter().all(|g| *g == 0.0) {
                continue;
            }
            let x = values.cell(r, c).to_vec();
            let gx = params.value_proj.backward(&x, &gv, &mut grads.value_proj);
            g_values
                .array_mut()
                .slice_mut(ndarray::s![r, c, ..])
                .assign(&Array1::from(gx));
        }
    }

    DeformGrads {
        query: g_query,
        reference: g_ref,
        values: g_values,
        params: grads,
    }
}
