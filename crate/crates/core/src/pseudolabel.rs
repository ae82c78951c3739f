//! Attention-driven pseudo ground truth for base fine-tuning.
//!
//! The backbone's stride-16 features are pooled over channels, bilinearly
//! upsampled to the image and min-max normalized. Unmatched predictions are
//! scored by the mean attention inside their box and the best `k` become
//! class-only targets for the "unknown object" class.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::matching::MatchResult;

/// Per-image attention in `[0, 1]`, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub prediction_index: usize,
    pub bbox: BBox,
    pub class_id: usize,
    pub objectness: f64,
}

/// Relative spread below which a map counts as constant.
const FLAT_TOLERANCE: f64 = 1e-12;

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sample = |pos: f64, n: usize| -> (usize, usize, f64) {
        let p = pos.max(0.0);
        let i0 = (p.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (y0, y1, fy) = sample((r as f64 + 0.5) * sy - 0.5, h);
        for c in 0..out_w {
            let (x0, x1, fx) = sample((c as f64 + 0.5) * sx - 0.5, w);
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    out
}

/// Channel mean of `features` (`channels x h x w`, channel-major), upsampled and normalized.
///
/// A constant map normalizes to all zeros.
pub fn attention_map(features: &[f64], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Result<AttentionMap> {
    if channels == 0 || h == 0 || w == 0 || features.len() != channels * h * w {
        return Err(Error::Shape(format!(
            "attention map: {} values for {channels}x{h}x{w}",
            features.len()
        )));
    }
    let plane = h * w;
    let mut pooled = vec![0.0; plane];
    for ch in features.chunks_exact(plane) {
        for (p, v) in pooled.iter_mut().zip(ch) {
            *p += v;
        }
    }
    for p in &mut pooled {
        *p /= channels as f64;
    }
    let mut values = bilinear_resize(&pooled, h, w, out_h, out_w);
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let flat = range <= FLAT_TOLERANCE * lo.abs().max(hi.abs());
    for v in &mut values {
        *v = if !flat { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
    }
    Ok(AttentionMap {
        height: out_h,
        width: out_w,
        values,
    })
}

/// [`attention_map`] from a `(1, c, h, w)` or `(c, h, w)` feature tensor.
pub fn attention_map_from_tensor(features: &Tensor, out_h: usize, out_w: usize) -> Result<AttentionMap> {
    let dims = features.dims();
    if dims.len() < 3 {
        return Err(Error::Shape(format!("attention map needs a (c, h, w) grid, got {dims:?}")));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let c = features.elem_count() / (h * w);
    let v = features.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    attention_map(&v, c, h, w, out_h, out_w)
}

/// Mean attention over pixels whose centers fall inside `bbox`.
pub fn objectness(map: &AttentionMap, bbox: &BBox) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let [x0, y0, x1, y1] = bbox.corners();
    // candidate range padded by one pixel; `contains_pixel` decides membership
    let range = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        let a = ((lo * n as f64 - 0.5).ceil() - 1.0).clamp(0.0, n as f64) as usize;
        let b = ((hi * n as f64 - 0.5).floor() + 2.0).clamp(0.0, n as f64) as usize;
        (a, b)
    };
    let (r0, r1) = range(y0, y1, map.height);
    let (c0, c1) = range(x0, x1, map.width);
    for r in r0..r1 {
        for c in c0..c1 {
            if bbox.contains_pixel(r, c, map.height, map.width) {
                sum += map.get(r, c);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::DegenerateBox(format!(
            "({:.4}, {:.4}, {:.4}, {:.4})",
            bbox.cx, bbox.cy, bbox.w, bbox.h
        )));
    }
    Ok(sum / n as f64)
}

/// Top-`k` unmatched predictions by objectness, labelled `unknown_class`.
///
/// A predicted box covering no pixel scores 0. Ties go to the lower index.
pub fn search_pseudo_gt(
    boxes: &[BBox],
    matching: &MatchResult,
    map: &AttentionMap,
    k: usize,
    unknown_class: usize,
) -> Result<Vec<PseudoLabel>> {
    let mut scored = Vec::with_capacity(matching.unmatched_predictions.len());
    for &i in &matching.unmatched_predictions {
        let b = boxes
            .get(i)
            .ok_or_else(|| Error::Input(format!("unmatched prediction {i} out of range")))?;
        let s = match objectness(map, b) {
            Ok(s) => s,
            Err(Error::DegenerateBox(_)) => 0.0,
            Err(e) => return Err(e),
        };
        scored.push((i, s));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, s)| PseudoLabel {
            prediction_index: i,
            bbox: boxes[i],
            class_id: unknown_class,
            objectness: s,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, values: Vec<f64>) -> AttentionMap {
        AttentionMap {
            height: h,
            width: w,
            values,
        }
    }

    fn brute_objectness(m: &AttentionMap, b: &BBox) -> Option<f64> {
        let mut v = Vec::new();
        for r in 0..m.height {
            for c in 0..m.width {
                if b.contains_pixel(r, c, m.height, m.width) {
                    v.push(m.get(r, c));
                }
            }
        }
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Bilinear sampling written per output pixel from the definition.
    fn oracle_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let at = |r: isize, c: isize| src[(r.clamp(0, h as isize - 1) as usize) * w + c.clamp(0, w as isize - 1) as usize];
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                let y = ((r as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0);
                let x = ((c as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0);
                let (yf, xf) = (y.floor(), x.floor());
                let (dy, dx) = (y - yf, x - xf);
                let (yi, xi) = (yf as isize, xf as isize);
                let mut v = 0.0;
                for (oy, wy) in [(0, 1.0 - dy), (1, dy)] {
                    for (ox, wx) in [(0, 1.0 - dx), (1, dx)] {
                        v += wy * wx * at(yi + oy, xi + ox);
                    }
                }
                out[r * ow + c] = v;
            }
        }
        out
    }

    #[test]
    fn constant_features_give_constant_map() {
        let a = attention_map(&vec![0.7; 3 * 4 * 4], 3, 4, 4, 64, 64).unwrap();
        assert!(a.values.iter().all(|&v| v == a.values[0]));
    }

    #[test]
    fn hot_cell_peaks_inside_its_footprint() {
        let mut f = vec![0.0; 2 * 4 * 4];
        f[2 * 4 + 1] = 5.0;
        let a = attention_map(&f, 2, 4, 4, 64, 64).unwrap();
        let (best, _) = a
            .values
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let (r, c) = (best / 64, best % 64);
        assert!((32..48).contains(&r) && (16..32).contains(&c), "{r} {c}");
    }

    #[test]
    fn attention_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (c, h, w) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
            let (oh, ow) = (rng.gen_range(4..40), rng.gen_range(4..40));
            let f: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = attention_map(&f, c, h, w, oh, ow).unwrap();
            let pooled: Vec<f64> = (0..h * w).map(|p| (0..c).map(|k| f[k * h * w + p]).sum::<f64>() / c as f64).collect();
            let up = oracle_resize(&pooled, h, w, oh, ow);
            let lo = up.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (g, u) in got.values.iter().zip(&up) {
                let want = if hi - lo > 1e-12 * lo.abs().max(hi.abs()) { (u - lo) / (hi - lo) } else { 0.0 };
                assert!((g - want).abs() < 1e-6);
                assert!((0.0..=1.0).contains(g));
            }
        }
    }

    #[test]
    fn objectness_examples() {
        let m = map(4, 4, vec![0.3; 16]);
        assert!((objectness(&m, &BBox::new(0.5, 0.5, 0.5, 0.5).unwrap()).unwrap() - 0.3).abs() < 1e-12);
        let z = map(4, 4, vec![0.0; 16]);
        assert_eq!(objectness(&z, &BBox::new(0.3, 0.6, 0.4, 0.2).unwrap()).unwrap(), 0.0);
        let mut v = vec![0.0; 16];
        v[5] = 0.2;
        v[6] = 0.8;
        let two = map(4, 4, v);
        // covers pixel centers (1, 1) and (1, 2) only
        let b = BBox::new(0.5, 0.375, 0.5, 0.2).unwrap();
        assert!((objectness(&two, &b).unwrap() - 0.5).abs() < 1e-12);
        let tiny = BBox::new(0.5, 0.5, 0.01, 0.01).unwrap();
        assert!(matches!(objectness(&two, &tiny), Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn objectness_equals_pixel_scan_on_all_16x16_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = map(16, 16, (0..256).map(|_| rng.gen::<f64>()).collect());
        for r0 in 0..16 {
            for r1 in r0..16 {
                for c0 in 0..16 {
                    for c1 in c0..16 {
                        let b = BBox::from_corners(c0 as f64 / 16.0, r0 as f64 / 16.0, (c1 + 1) as f64 / 16.0, (r1 + 1) as f64 / 16.0)
                            .unwrap();
                        assert_eq!(objectness(&m, &b).ok(), brute_objectness(&m, &b));
                    }
                }
            }
        }
    }

    #[test]
    fn objectness_equals_pixel_scan_on_random_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..300 {
            let (h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
            let m = map(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect());
            let b = BBox::new(rng.gen(), rng.gen(), rng.gen_range(0.001..1.2), rng.gen_range(0.001..1.2)).unwrap();
            let got = objectness(&m, &b).ok();
            let want = brute_objectness(&m, &b);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Vec<BBox>, MatchResult, AttentionMap, usize) {
        let p = rng.gen_range(1..25);
        let g = rng.gen_range(0..=p.min(8));
        let k = rng.gen_range(1..8);
        let mut idx: Vec<usize> = (0..p).collect();
        for i in (1..p).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let mut pairs: Vec<(usize, usize)> = idx[..g].iter().enumerate().map(|(j, &i)| (i, j)).collect();
        pairs.sort();
        let mut unmatched: Vec<usize> = idx[g..].to_vec();
        unmatched.sort();
        let boxes = (0..p)
            .map(|_| BBox::new(rng.gen(), rng.gen(), rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6)).unwrap())
            .collect();
        let m = map(16, 16, (0..256).map(|_| (rng.gen_range(0..4) as f64) / 3.0).collect());
        (
            boxes,
            MatchResult {
                pairs,
                unmatched_predictions: unmatched,
            },
            m,
            k,
        )
    }

    #[test]
    fn search_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let (boxes, mr, m, k) = random_case(&mut rng);
            let got = search_pseudo_gt(&boxes, &mr, &m, k, 8).unwrap();
            assert_eq!(got.len(), k.min(boxes.len() - mr.pairs.len()));
            assert!(got.iter().all(|p| mr.pairs.iter().all(|&(i, _)| i != p.prediction_index)));
            assert!(got.windows(2).all(|w| w[0].objectness >= w[1].objectness));
            assert!(got.iter().all(|p| (0.0..=1.0).contains(&p.objectness) && p.class_id == 8));
            let mut oracle: Vec<(f64, usize)> = mr
                .unmatched_predictions
                .iter()
                .map(|&i| (brute_objectness(&m, &boxes[i]).unwrap_or(0.0), i))
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = oracle.iter().take(k).map(|x| x.1).collect();
            assert_eq!(got.iter().map(|p| p.prediction_index).collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn count_boundaries() {
        let boxes: Vec<BBox> = (0..10).map(|i| BBox::new(0.05 + 0.09 * i as f64, 0.5, 0.1, 0.1).unwrap()).collect();
        let m = map(8, 8, (0..64).map(|i| i as f64 / 63.0).collect());
        let mr = MatchResult {
            pairs: vec![(0, 0), (4, 1), (7, 2)],
            unmatched_predictions: vec![1, 2, 3, 5, 6, 8, 9],
        };
        assert_eq!(search_pseudo_gt(&boxes, &mr, &m, 5, 8).unwrap().len(), 5);
        let few = MatchResult {
            pairs: (0..8).map(|i| (i, i)).collect(),
            unmatched_predictions: vec![8, 9],
        };
        assert_eq!(search_pseudo_gt(&boxes, &few, &m, 5, 8).unwrap().len(), 2);
    }
}
