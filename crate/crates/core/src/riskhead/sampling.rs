use ndarray::{Array3, ArrayView1};

/// Dense `[height, width, dim]` feature map sampled in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Self {
        Self {
            data: data.as_standard_layout().into_owned(),
        }
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self::new(Array3::zeros((height, width, dim)))
    }

    pub fn from_fn(height: usize, width: usize, dim: usize, f: impl FnMut((usize, usize, usize)) -> f64) -> Self {
        Self::new(Array3::from_shape_fn((height, width, dim), f))
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> ArrayView1<'_, f64> {
        self.data.slice(ndarray::s![row, col, ..])
    }

    fn raw(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }
}

/// One in-bounds neighbor of a bilinear sample with its weight and the
/// weight's derivative w.r.t. the normalized location.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tap {
    pub row: usize,
    pub col: usize,
    pub weight: f64,
    pub dweight_dx: f64,
    pub dweight_dy: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Taps {
    taps: [Tap; 4],
    len: usize,
}

impl Taps {
    pub fn iter(&self) -> impl Iterator<Item = &Tap> {
        self.taps[..self.len].iter()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Neighbors of the continuous pixel position `(x * W - 0.5, y * H - 0.5)`.
/// Out-of-bounds neighbors are dropped (zero padding).
pub fn bilinear_taps(height: usize, width: usize, loc: (f64, f64)) -> Taps {
    let mut out = Taps::default();
    let (wf, hf) = (width as f64, height as f64);
    let px = loc.0 * wf - 0.5;
    let py = loc.1 * hf - 0.5;
    if !(px.is_finite() && py.is_finite()) || px <= -1.0 || py <= -1.0 || px >= wf || py >= hf {
        return out;
    }
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let corners = [
        (y0, x0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy) * wf, -(1.0 - fx) * hf),
        (y0, x0 + 1, fx * (1.0 - fy), (1.0 - fy) * wf, -fx * hf),
        (y0 + 1, x0, (1.0 - fx) * fy, -fy * wf, (1.0 - fx) * hf),
        (y0 + 1, x0 + 1, fx * fy, fy * wf, fx * hf),
    ];
    for (row, col, weight, dweight_dx, dweight_dy) in corners {
        if row < 0 || col < 0 || row as usize >= height || col as usize >= width {
            continue;
        }
        out.taps[out.len] = Tap {
            row: row as usize,
            col: col as usize,
            weight,
            dweight_dx,
            dweight_dy,
        };
        out.len += 1;
    }
    out
}

/// Bilinear interpolation of `map` at normalized `loc`, zero outside the map.
pub fn bilinear_sample(map: &FeatureMap, loc: (f64, f64)) -> Vec<f64> {
    let mut out = vec![0.0; map.dim()];
    sample_channels_into(map, loc, 0, &mut out);
    out
}

/// Accumulates channels `[start, start + out.len())` of the sample into `out`.
pub(crate) fn sample_channels_into(map: &FeatureMap, loc: (f64, f64), start: usize, out: &mut [f64]) {
    let dim = map.dim();
    let raw = map.raw();
    let n = out.len();
    for tap in bilinear_taps(map.height(), map.width(), loc).iter() {
        let base = (tap.row * map.width() + tap.col) * dim + start;
        for (o, v) in out.iter_mut().zip(&raw[base..base + n]) {
            *o += tap.weight * v;
        }
    }
}

/// Vector-Jacobian product of the sample w.r.t. the location, restricted to
/// channels `[start, start + grad_out.len())`.
pub(crate) fn sample_loc_vjp(map: &FeatureMap, loc: (f64, f64), start: usize, grad_out: &[f64]) -> (f64, f64) {
    let dim = map.dim();
    let raw = map.raw();
    let (mut gx, mut gy) = (0.0, 0.0);
    for tap in bilinear_taps(map.height(), map.width(), loc).iter() {
        let base = (tap.row * map.width() + tap.col) * dim + start;
        let dot: f64 = grad_out
            .iter()
            .zip(&raw[base..base + grad_out.len()])
            .map(|(g, v)| g * v)
            .sum();
        gx += tap.dweight_dx * dot;
        gy += tap.dweight_dy * dot;
    }
    (gx, gy)
}

/// Scatter `grad_out` (channels `[start, ..)`) back onto the map's gradient.
pub(crate) fn sample_map_vjp(grad_map: &mut FeatureMap, loc: (f64, f64), start: usize, grad_out: &[f64]) {
    let (height, width) = (grad_map.height(), grad_map.width());
    for tap in bilinear_taps(height, width, loc).iter() {
        let mut cell = grad_map
            .data
            .slice_mut(ndarray::s![tap.row, tap.col, start..start + grad_out.len()]);
        for (c, g) in cell.iter_mut().zip(grad_out) {
            *c += tap.weight * g;
        }
    }
}

/// Full Jacobian-transpose of `bilinear_sample` w.r.t. `loc`.
pub fn bilinear_sample_loc_vjp(map: &FeatureMap, loc: (f64, f64), grad_out: &[f64]) -> (f64, f64) {
    sample_loc_vjp(map, loc, 0, grad_out)
}
