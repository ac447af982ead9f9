//! Rasterizing risk annotations into an 8-bit semantic mask.

use super::vlm::{AnnotationWarning, RiskAnnotationEntry};

/// Gray level of a score: `round(255 * s)`.
pub fn intensity(score: f64) -> u8 {
    (255.0 * score.clamp(0.0, 1.0)).round() as u8
}

/// Row-major `height x width` mask. A pixel `[c, c+1) x [r, r+1)` is covered
/// by a box when they overlap with positive area; overlapping boxes keep the
/// maximum. Boxes reaching outside the image are clipped with a warning.
pub fn draw_semantic_mask(
    entries: &[RiskAnnotationEntry],
    width: usize,
    height: usize,
) -> (Vec<u8>, Vec<AnnotationWarning>) {
    let mut mask = vec![0u8; width * height];
    let mut warnings = Vec::new();
    let (wf, hf) = (width as f64, height as f64);
    for e in entries {
        let [x1, y1, x2, y2] = e.bbox;
        if x1 < 0.0 || y1 < 0.0 || x2 > wf || y2 > hf {
            log::warn!("entry {}: bbox {:?} clipped to {width}x{height}", e.rank, e.bbox);
            warnings.push(AnnotationWarning::BboxClipped { rank: e.rank, bbox: e.bbox });
        }
        let (x1, x2) = (x1.clamp(0.0, wf), x2.clamp(0.0, wf));
        let (y1, y2) = (y1.clamp(0.0, hf), y2.clamp(0.0, hf));
        if x2 <= x1 || y2 <= y1 {
            continue;
        }
        let (c0, c1) = (x1.floor() as usize, (x2.ceil() as usize).min(width));
        let (r0, r1) = (y1.floor() as usize, (y2.ceil() as usize).min(height));
        let v = intensity(e.risk_score);
        for r in r0..r1 {
            for px in &mut mask[r * width + c0..r * width + c1] {
                *px = (*px).max(v);
            }
        }
    }
    (mask, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::vlm::RiskLevel;
    use proptest::prelude::*;

    fn entry(bbox: [f64; 4], s: f64) -> RiskAnnotationEntry {
        RiskAnnotationEntry {
            rank: 0,
            category_id: 3,
            bbox,
            risk_score: s,
            risk_level: RiskLevel::Low,
            category_name: "car".into(),
            reason: String::new(),
        }
    }

    #[test]
    fn empty_is_zero() {
        let (m, w) = draw_semantic_mask(&[], 4, 3);
        assert_eq!(m, vec![0; 12]);
        assert!(w.is_empty());
    }

    #[test]
    fn full_score_rectangle() {
        let (m, _) = draw_semantic_mask(&[entry([1.0, 1.0, 3.0, 2.0], 1.0)], 4, 3);
        assert_eq!(m, vec![0, 0, 0, 0, 0, 255, 255, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn overlap_keeps_max() {
        let e = [entry([0.0, 0.0, 3.0, 3.0], 0.4), entry([2.0, 2.0, 4.0, 4.0], 0.8)];
        let (m, _) = draw_semantic_mask(&e, 4, 4);
        assert_eq!(m[2 * 4 + 2], 204);
        assert_eq!(m[0], 102);
        assert_eq!(m[3 * 4 + 3], 204);
    }

    #[test]
    fn out_of_bounds_is_clipped() {
        let (m, w) = draw_semantic_mask(&[entry([-5.0, 1.0, 2.0, 9.0], 0.5)], 3, 3);
        assert_eq!(w.len(), 1);
        assert_eq!(m, vec![0, 0, 0, 128, 128, 0, 128, 128, 0]);
    }

    fn layout() -> impl Strategy<Value = Vec<([f64; 4], f64)>> {
        prop::collection::vec(
            ((0.0..12.0f64, 0.0..12.0f64, 0.0..12.0f64, 0.0..12.0f64), 0.0..=1.0f64)
                .prop_map(|((a, b, c, d), s)| ([a.min(c), b.min(d), a.max(c), b.max(d)], s)),
            0..6,
        )
    }

    proptest! {
        #[test]
        fn matches_per_pixel_oracle(boxes in layout()) {
            let (w, h) = (12usize, 10usize);
            let entries: Vec<_> = boxes.iter().map(|(b, s)| entry(*b, *s)).collect();
            let (m, _) = draw_semantic_mask(&entries, w, h);
            for r in 0..h {
                for c in 0..w {
                    let (px0, py0) = (c as f64, r as f64);
                    let best = boxes
                        .iter()
                        .filter(|(b, _)| {
                            let ix = b[2].min(px0 + 1.0) - b[0].max(px0);
                            let iy = b[3].min(py0 + 1.0) - b[1].max(py0);
                            ix > 0.0 && iy > 0.0
                        })
                        .map(|(_, s)| (255.0 * s).round() as u8)
                        .max()
                        .unwrap_or(0);
                    prop_assert_eq!(m[r * w + c], best, "pixel ({}, {})", r, c);
                }
            }
        }
    }
}
