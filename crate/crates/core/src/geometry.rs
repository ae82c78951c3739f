//! Box and mask primitives.
//!
//! Boxes are center-form `(cx, cy, w, h)` in normalized image coordinates.
//! Masks are row-major binary grids. A pixel `(r, c)` covers
//! `[c, c + 1) x [r, r + 1)` in pixel units, so its center sits at
//! `((c + 0.5) / W, (r + 0.5) / H)` in normalized units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Center-format normalized bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners clipped to the unit square.
    pub fn clipped_corners(&self) -> [f64; 4] {
        let [x0, y0, x1, y1] = self.corners();
        [x0.clamp(0.0, 1.0), y0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0)]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Pixel-center containment test used for rasterization.
    pub fn contains_pixel(&self, row: usize, col: usize, height: usize, width: usize) -> bool {
        let [x0, y0, x1, y1] = self.corners();
        let x = (col as f64 + 0.5) / width as f64;
        let y = (row as f64 + 0.5) / height as f64;
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

fn intersection_and_union(a: &BBox, b: &BBox) -> (f64, f64) {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    (inter, area_a + area_b - inter)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = intersection_and_union(a, b);
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// `1 - GIoU`, in `[0, 2]`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    let (inter, union) = intersection_and_union(pred, gt);
    let [ax0, ay0, ax1, ay1] = pred.corners();
    let [bx0, by0, bx1, by1] = gt.corners();
    let enclosure = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    let iou = inter / union;
    let giou = iou - (enclosure - union) / enclosure;
    (1.0 - giou).clamp(0.0, 2.0)
}

/// Row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        BinaryMask { height, width, data }
    }

    /// Binarize a soft mask: values `>= threshold` become foreground.
    pub fn from_soft(height: usize, width: usize, values: &[f32], threshold: f32) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "soft mask has {} values, expected {height}x{width}",
                values.len()
            )));
        }
        let data = values.iter().map(|&v| (v >= threshold) as u8).collect();
        Ok(BinaryMask { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Area-average onto a `height x width` grid, then threshold at 0.5.
    pub fn downsample(&self, height: usize, width: usize) -> BinaryMask {
        let fractions = self.area_fractions(height, width);
        let data = fractions.iter().map(|&v| (v >= 0.5) as u8).collect();
        BinaryMask { height, width, data }
    }

    /// Foreground coverage fraction of each cell on a coarser grid.
    pub fn area_fractions(&self, height: usize, width: usize) -> Vec<f64> {
        let mut out = vec![0.0; height * width];
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for (r, row) in out.chunks_mut(width).enumerate() {
            let (y0, y1) = (r as f64 * sy, (r + 1) as f64 * sy);
            for (c, cell) in row.iter_mut().enumerate() {
                let (x0, x1) = (c as f64 * sx, (c + 1) as f64 * sx);
                let mut acc = 0.0;
                for pr in (y0.floor() as usize)..(y1.ceil() as usize).min(self.height) {
                    let oy = (y1.min(pr as f64 + 1.0) - y0.max(pr as f64)).max(0.0);
                    for pc in (x0.floor() as usize)..(x1.ceil() as usize).min(self.width) {
                        if self.get(pr, pc) {
                            let ox = (x1.min(pc as f64 + 1.0) - x0.max(pc as f64)).max(0.0);
                            acc += ox * oy;
                        }
                    }
                }
                *cell = acc / (sx * sy);
            }
        }
        out
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Rasterize a box by pixel-center containment.
pub fn render_box(b: &BBox, height: usize, width: usize) -> BinaryMask {
    BinaryMask::from_fn(height, width, |r, c| b.contains_pixel(r, c, height, width))
}

/// Tight box around the foreground pixels.
pub fn mask_to_box(mask: &BinaryMask) -> Result<BBox> {
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..mask.height {
        let row = &mask.data[r * mask.width..(r + 1) * mask.width];
        if let Some(first) = row.iter().position(|&v| v != 0) {
            let last = row.iter().rposition(|&v| v != 0).unwrap_or(first);
            rmin = rmin.min(r);
            rmax = rmax.max(r);
            cmin = cmin.min(first);
            cmax = cmax.max(last);
        }
    }
    if rmin == usize::MAX {
        return Err(Error::EmptyMask);
    }
    let (h, w) = (mask.height as f64, mask.width as f64);
    BBox::from_corners(
        cmin as f64 / w,
        rmin as f64 / h,
        (cmax + 1) as f64 / w,
        (rmax + 1) as f64 / h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn crossing_strips_intersect_with_giou_loss_above_one() {
        let horizontal = bx(0.5, 0.5, 0.9, 0.1);
        let vertical = bx(0.5, 0.5, 0.1, 0.9);
        assert!(iou(&horizontal, &vertical) > 0.0);
        assert!(giou_loss(&horizontal, &vertical) > 1.0);
    }

    #[test]
    fn iou_identity_disjoint_and_nested() {
        let a = bx(0.3, 0.4, 0.2, 0.1);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.1, 0.1, 0.1, 0.1), &bx(0.8, 0.8, 0.1, 0.1)), 0.0);
        // inter = 0.25, union = 1.0
        assert!((iou(&bx(0.5, 0.5, 0.5, 0.5), &bx(0.5, 0.5, 1.0, 1.0)) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn giou_cases() {
        let a = bx(0.4, 0.6, 0.3, 0.2);
        assert_eq!(giou_loss(&a, &a), 0.0);
        // Nested boxes: union equals the enclosure, so GIoU == IoU.
        let outer = bx(0.5, 0.5, 0.6, 0.6);
        let inner = bx(0.5, 0.5, 0.3, 0.3);
        assert!((giou_loss(&inner, &outer) - (1.0 - iou(&inner, &outer))).abs() < 1e-12);
        // Touching halves: IoU 0 and the enclosure is fully covered.
        let l = giou_loss(&bx(0.25, 0.5, 0.5, 1.0), &bx(0.75, 0.5, 0.5, 1.0));
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(0.5, f64::NAN, 0.1, 0.1).is_err());
    }

    #[test]
    fn mask_to_box_single_pixel_and_full() {
        let mut m = BinaryMask::zeros(8, 10);
        m.set(3, 7, true);
        let b = mask_to_box(&m).unwrap();
        assert!((b.cx - 7.5 / 10.0).abs() < 1e-12);
        assert!((b.cy - 3.5 / 8.0).abs() < 1e-12);
        assert!((b.w - 0.1).abs() < 1e-12 && (b.h - 0.125).abs() < 1e-12);

        let full = BinaryMask::from_fn(5, 5, |_, _| true);
        assert_eq!(mask_to_box(&full).unwrap(), bx(0.5, 0.5, 1.0, 1.0));
        assert!(matches!(mask_to_box(&BinaryMask::zeros(4, 4)), Err(Error::EmptyMask)));
    }

    #[test]
    fn mask_to_box_matches_pixel_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
            let m = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.15));
            if m.is_empty() {
                continue;
            }
            let mut rows = vec![];
            let mut cols = vec![];
            for r in 0..h {
                for c in 0..w {
                    if m.get(r, c) {
                        rows.push(r);
                        cols.push(c);
                    }
                }
            }
            let (r0, r1) = (*rows.iter().min().unwrap(), *rows.iter().max().unwrap());
            let (c0, c1) = (*cols.iter().min().unwrap(), *cols.iter().max().unwrap());
            let b = mask_to_box(&m).unwrap();
            let [x0, y0, x1, y1] = b.corners();
            assert!((x0 * w as f64 - c0 as f64).abs() < 1e-9);
            assert!((x1 * w as f64 - (c1 + 1) as f64).abs() < 1e-9);
            assert!((y0 * h as f64 - r0 as f64).abs() < 1e-9);
            assert!((y1 * h as f64 - (r1 + 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn downsample_area_average() {
        let m = BinaryMask::from_fn(4, 4, |r, c| r < 2 && c < 3);
        let d = m.downsample(2, 2);
        // top-left cell fully covered, top-right half covered, bottom empty
        assert_eq!(d.data(), &[1, 1, 0, 0]);
        let f = m.area_fractions(2, 2);
        assert_eq!(f, vec![1.0, 0.5, 0.0, 0.0]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.05f64..0.95, 0.05f64..0.95, 0.02f64..0.6, 0.02f64..0.6)
            .prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
    }

    proptest! {
        #[test]
        fn giou_bounds_and_symmetry(a in arb_box(), b in arb_box()) {
            let l = giou_loss(&a, &b);
            prop_assert!((0.0..=2.0).contains(&l));
            let [ax0, ay0, ax1, ay1] = a.corners();
            let [bx0, by0, bx1, by1] = b.corners();
            let nested = (ax0 <= bx0 && ay0 <= by0 && ax1 >= bx1 && ay1 >= by1)
                || (bx0 <= ax0 && by0 <= ay0 && bx1 >= ax1 && by1 >= ay1);
            if nested {
                prop_assert!(l <= 1.0 + 1e-12);
            }
            if iou(&a, &b) > 0.0 {
                prop_assert!(l < 2.0);
            }
            prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn translation_invariance(a in arb_box(), b in arb_box(), dx in -0.3f64..0.3, dy in -0.3f64..0.3) {
            let (ta, tb) = (a.translate(dx, dy), b.translate(dx, dy));
            prop_assert!((iou(&a, &b) - iou(&ta, &tb)).abs() < 1e-9);
            prop_assert!((giou_loss(&a, &b) - giou_loss(&ta, &tb)).abs() < 1e-9);
        }

        #[test]
        fn render_then_extract_within_a_pixel(b in arb_box()) {
            let (h, w) = (32usize, 48usize);
            let m = render_box(&b, h, w);
            prop_assume!(!m.is_empty());
            let back = mask_to_box(&m).unwrap();
            let [x0, y0, x1, y1] = b.clipped_corners();
            let [bx0, by0, bx1, by1] = back.corners();
            prop_assert!((x0 - bx0).abs() <= 1.0 / w as f64 + 1e-9);
            prop_assert!((x1 - bx1).abs() <= 1.0 / w as f64 + 1e-9);
            prop_assert!((y0 - by0).abs() <= 1.0 / h as f64 + 1e-9);
            prop_assert!((y1 - by1).abs() <= 1.0 / h as f64 + 1e-9);
        }
    }
}
