use ndarray::{s, Array3, ArrayView4};
use serde::{Deserialize, Serialize};

pub const DEFAULT_RISK_THRESHOLD: f64 = 0.6;

/// Linear read-out followed by the logistic function.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskDecoder {
    pub weight: Vec<f64>,
    pub bias: f64,
    /// Pixels scoring strictly above this form objects.
    pub threshold: f64,
}

impl RiskDecoder {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim],
            bias: 0.0,
            threshold: DEFAULT_RISK_THRESHOLD,
        }
    }

    pub fn score(&self, feature: &[f64]) -> f64 {
        let z: f64 = self.bias + self.weight.iter().zip(feature).map(|(w, f)| w * f).sum::<f64>();
        logistic(z).clamp(0.0, 1.0)
    }
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One connected hot region of a view's risk map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskObject {
    pub view: usize,
    /// `[x1, y1, x2, y2]` normalized by the PV grid size.
    pub bbox: [f64; 4],
    pub risk_score: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskPrediction {
    /// `[N_cam, H, W]` in `[0, 1]`.
    pub pv_risk_map: Array3<f64>,
    /// Sorted by descending `risk_score`.
    pub objects: Vec<RiskObject>,
}

impl RiskPrediction {
    /// Quantized 8-bit image of one view.
    pub fn view_image(&self, view: usize) -> Vec<u8> {
        self.pv_risk_map
            .slice(s![view, .., ..])
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.objects.iter().map(|o| o.risk_score).collect()
    }
}

/// Score every PV pixel and extract 4-connected regions above the threshold.
pub fn risk_decode(features: ArrayView4<'_, f64>, head: &RiskDecoder) -> RiskPrediction {
    let (views, height, width, _) = features.dim();
    let mut map = Array3::zeros((views, height, width));
    for v in 0..views {
        for r in 0..height {
            for c in 0..width {
                let f = features.slice(s![v, r, c, ..]);
                map[[v, r, c]] = match f.as_slice() {
                    Some(slice) => head.score(slice),
                    None => head.score(&f.to_vec()),
                };
            }
        }
    }

    let mut objects = Vec::new();
    let mut seen = vec![false; height * width];
    for v in 0..views {
        seen.iter_mut().for_each(|s| *s = false);
        for start in 0..height * width {
            let (r0, c0) = (start / width, start % width);
            if seen[start] || map[[v, r0, c0]] <= head.threshold {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![(r0, c0)];
            let (mut rmin, mut rmax, mut cmin, mut cmax) = (r0, r0, c0, c0);
            let mut best = 0.0f64;
            while let Some((r, c)) = stack.pop() {
                best = best.max(map[[v, r, c]]);
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
                let mut visit = |rr: usize, cc: usize| {
                    let i = rr * width + cc;
                    if !seen[i] && map[[v, rr, cc]] > head.threshold {
                        seen[i] = true;
                        stack.push((rr, cc));
                    }
                };
                if r > 0 {
                    visit(r - 1, c);
                }
                if r + 1 < height {
                    visit(r + 1, c);
                }
                if c > 0 {
                    visit(r, c - 1);
                }
                if c + 1 < width {
                    visit(r, c + 1);
                }
            }
            objects.push(RiskObject {
                view: v,
                bbox: [
                    cmin as f64 / width as f64,
                    rmin as f64 / height as f64,
                    (cmax + 1) as f64 / width as f64,
                    (rmax + 1) as f64 / height as f64,
                ],
                risk_score: best,
                rank: 0,
            });
        }
    }
    // stable: equal scores keep discovery order (view, then raster order)
    objects.sort_by(|a, b| b.risk_score.total_cmp(&a.risk_score));
    for (rank, o) in objects.iter_mut().enumerate() {
        o.rank = rank;
    }
    RiskPrediction {
        pv_risk_map: map,
        objects,
    }
}
