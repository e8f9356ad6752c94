//! Boxes, regression deltas, overlap, NMS, anchor grids and anchor-driven
//! sampling offsets.

use crate::error::{Error, Result};
use crate::tensor::OffsetField;

/// Log-scale deltas are clamped to this magnitude before exponentiation.
pub const DELTA_LOG_CLAMP: f64 = 4.0;

/// Axis-aligned box in center form, image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        if !b.is_valid() {
            return Err(Error::config("box", format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x: 0.5 * (x1 + x2),
            y: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - 0.5 * self.w,
            self.y - 0.5 * self.h,
            self.x + 0.5 * self.w,
            self.y + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    /// Intersection with `[0, width] × [0, height]`, or `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        let (x1, y1, x2, y2) = self.corners();
        let b = Self::from_corners(
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
            x2.clamp(0.0, width),
            y2.clamp(0.0, height),
        );
        b.is_valid().then_some(b)
    }

    pub fn flip_horizontal(&self, width: f64) -> Self {
        Self {
            x: width - self.x,
            ..*self
        }
    }

    /// Whether the point lies inside this box scaled by `factor` about its center,
    /// boundary included.
    pub fn region_contains(&self, factor: f64, px: f64, py: f64) -> bool {
        (px - self.x).abs() <= 0.5 * factor * self.w && (py - self.y).abs() <= 0.5 * factor * self.h
    }
}

/// Regression offsets from an anchor to a target box.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Delta {
    pub const ZERO: Delta = Delta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode(anchor: &BBox, target: &BBox) -> Delta {
    Delta {
        dx: (target.x - anchor.x) / anchor.w,
        dy: (target.y - anchor.y) / anchor.h,
        dw: (target.w / anchor.w).ln(),
        dh: (target.h / anchor.h).ln(),
    }
}

pub fn decode(anchor: &BBox, delta: &Delta) -> BBox {
    BBox {
        x: delta.dx * anchor.w + anchor.x,
        y: delta.dy * anchor.h + anchor.y,
        w: anchor.w * delta.dw.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP).exp(),
        h: anchor.h * delta.dh.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP).exp(),
    }
}

/// Diagonal Jacobian `∂(x, y, w, h) / ∂(dx, dy, dw, dh)` of [`decode`];
/// zero on a clamped log component.
pub fn decode_jacobian(anchor: &BBox, delta: &Delta) -> [f64; 4] {
    let scale = |d: f64, size: f64| {
        if d.abs() > DELTA_LOG_CLAMP {
            0.0
        } else {
            size * d.exp()
        }
    };
    [
        anchor.w,
        anchor.h,
        scale(delta.dw, anchor.w),
        scale(delta.dh, anchor.h),
    ]
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// Indices kept by greedy NMS, in descending score order (ties: lower index first).
pub fn nms_indices(candidates: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score));
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        let kept = &candidates[order[i]].bbox;
        keep.push(order[i]);
        for j in i + 1..order.len() {
            if !suppressed[j] && iou(kept, &candidates[order[j]].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn nms(candidates: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    nms_indices(candidates, iou_threshold)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Uniform grid of square anchors for one pyramid level, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLevel {
    pub stride: usize,
    pub base_size: f64,
    /// `(rows, cols)`
    pub grid: (usize, usize),
    pub anchors: Vec<BBox>,
}

impl AnchorLevel {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Same grid and stride carrying different (e.g. regressed) anchors.
    pub fn with_anchors(&self, anchors: Vec<BBox>) -> Result<Self> {
        if anchors.len() != self.anchors.len() {
            return Err(Error::shape(
                "AnchorLevel::with_anchors",
                self.anchors.len(),
                anchors.len(),
            ));
        }
        Ok(Self {
            anchors,
            ..self.clone()
        })
    }

    pub fn offsets(&self, kernel: (usize, usize)) -> OffsetField {
        anchor_offsets(self, kernel)
    }
}

pub fn build_anchor_level(
    image_w: usize,
    image_h: usize,
    stride: usize,
    base_size: f64,
) -> Result<AnchorLevel> {
    if stride == 0 {
        return Err(Error::config("stride", "stride must be positive"));
    }
    let (rows, cols) = (image_h / stride, image_w / stride);
    if rows == 0 || cols == 0 {
        return Err(Error::config(
            "stride",
            format!("stride {stride} leaves no grid cells in a {image_w}x{image_h} image"),
        ));
    }
    if !(base_size > 0.0 && base_size.is_finite()) {
        return Err(Error::config("base_size", "anchor size must be positive"));
    }
    let s = stride as f64;
    let mut anchors = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            anchors.push(BBox {
                x: (j as f64 + 0.5) * s,
                y: (i as f64 + 0.5) * s,
                w: base_size,
                h: base_size,
            });
        }
    }
    Ok(AnchorLevel {
        stride,
        base_size,
        grid: (rows, cols),
        anchors,
    })
}

/// Position of tap `k` along an axis of `taps` entries spread over `[-extent/2, extent/2]`.
fn shape_tap(k: usize, taps: usize, extent: f64) -> f64 {
    if taps == 1 {
        0.0
    } else {
        -0.5 * extent + extent * k as f64 / (taps - 1) as f64
    }
}

/// Sampling offsets that place the kernel taps over each location's anchor.
///
/// The anchor is projected onto the feature map in index coordinates (feature
/// cell `j` covers image pixels centred at `(j + ½)·stride`). Each tap lands at
/// `anchor center + shape offset`; the stored value is that position minus
/// the location and its dilation-1 regular tap.
pub fn anchor_offsets(level: &AnchorLevel, kernel: (usize, usize)) -> OffsetField {
    let (rows, cols) = level.grid;
    let (kh, kw) = kernel;
    let s = level.stride as f64;
    let mut field = OffsetField::zeros(rows, cols, kernel);
    for i in 0..rows {
        for j in 0..cols {
            let a = &level.anchors[i * cols + j];
            let (cx, cy) = (a.x / s - 0.5, a.y / s - 0.5);
            let (pw, ph) = (a.w / s, a.h / s);
            let (ctr_dx, ctr_dy) = (cx - j as f64, cy - i as f64);
            for ky in 0..kh {
                for kx in 0..kw {
                    let ry = ky as f64 - ((kh - 1) / 2) as f64;
                    let rx = kx as f64 - ((kw - 1) / 2) as f64;
                    let dy = ctr_dy + shape_tap(ky, kh, ph) - ry;
                    let dx = ctr_dx + shape_tap(kx, kw, pw) - rx;
                    field.set(i, j, ky * kw + kx, dy, dx);
                }
            }
        }
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn encode_identity_and_hand_example() {
        let a = b(3.0, -1.0, 2.0, 5.0);
        assert_eq!(encode(&a, &a), Delta::ZERO);
        let d = encode(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 4.0, 4.0));
        assert_eq!((d.dx, d.dy), (0.5, 0.5));
        assert!((d.dw - 2f64.ln()).abs() < 1e-15 && (d.dh - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn decode_hand_example_and_clamp() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(decode(&a, &Delta::ZERO), a);
        let r = decode(&a, &Delta::new(0.5, 0.5, 2f64.ln(), 2f64.ln()));
        assert!((r.x - 1.0).abs() < 1e-12 && (r.y - 1.0).abs() < 1e-12);
        assert!((r.w - 4.0).abs() < 1e-12 && (r.h - 4.0).abs() < 1e-12);
        let big = decode(&a, &Delta::new(0.0, 0.0, 100.0, -100.0));
        assert_eq!(big.w, 2.0 * 4f64.exp());
        assert_eq!(big.h, 2.0 * (-4f64).exp());
    }

    #[test]
    fn iou_cases() {
        let u = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&u, &u), 1.0);
        assert_eq!(iou(&u, &b(5.0, 0.0, 1.0, 1.0)), 0.0);
        assert!((iou(&u, &b(0.5, 0.0, 1.0, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nms_small_cases() {
        let s = |x: f64, score: f64| ScoredBox {
            bbox: b(x, 0.0, 1.0, 1.0),
            score,
        };
        assert!(nms(&[], 0.5).is_empty());
        assert_eq!(nms(&[s(0.0, 0.3)], 0.5), vec![s(0.0, 0.3)]);
        assert_eq!(nms(&[s(0.0, 0.8), s(0.0, 0.9)], 0.8), vec![s(0.0, 0.9)]);
        // equal scores: lower index wins
        assert_eq!(nms_indices(&[s(0.0, 0.5), s(0.1, 0.5)], 0.5), vec![0]);
    }

    #[test]
    fn anchor_grid_examples() {
        let one = build_anchor_level(8, 8, 8, 8.0).unwrap();
        assert_eq!(one.grid, (1, 1));
        assert_eq!(one.anchors, vec![b(4.0, 4.0, 8.0, 8.0)]);
        let four = build_anchor_level(16, 16, 8, 8.0).unwrap();
        assert_eq!(four.grid, (2, 2));
        let centers: Vec<_> = four.anchors.iter().map(|a| (a.x, a.y)).collect();
        assert_eq!(
            centers,
            vec![(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)]
        );
        assert!(matches!(
            build_anchor_level(8, 8, 16, 8.0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn unregressed_offsets_reproduce_dilated_grid() {
        for &(stride, dilation) in &[(4usize, 1usize), (4, 2), (8, 2), (8, 3), (16, 4)] {
            let size = (2 * dilation * stride) as f64;
            let level = build_anchor_level(64, 48, stride, size).unwrap();
            let (rows, cols) = level.grid;
            assert_eq!(
                anchor_offsets(&level, (3, 3)),
                OffsetField::dilated_grid(rows, cols, (3, 3), dilation)
            );
        }
    }

    #[test]
    fn shifted_anchor_moves_every_tap() {
        let level = build_anchor_level(32, 32, 8, 16.0).unwrap();
        let base = anchor_offsets(&level, (3, 3));
        let shifted = level
            .with_anchors(
                level
                    .anchors
                    .iter()
                    .map(|a| BBox { x: a.x + 8.0, ..*a })
                    .collect(),
            )
            .unwrap();
        let moved = anchor_offsets(&shifted, (3, 3));
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..9 {
                    let (dy0, dx0) = base.get(i, j, k);
                    let (dy1, dx1) = moved.get(i, j, k);
                    assert_eq!((dy1, dx1), (dy0, dx0 + 1.0));
                }
            }
        }
    }

    #[test]
    fn rectangular_anchor_tap_set() {
        // projected anchor (p_x, p_y, 4, 2) at stride 1 -> taps {-2,0,2} x {-1,0,1} about p
        let level = AnchorLevel {
            stride: 1,
            base_size: 1.0,
            grid: (5, 5),
            anchors: (0..25)
                .map(|i| b((i % 5) as f64 + 0.5, (i / 5) as f64 + 0.5, 4.0, 2.0))
                .collect(),
        };
        let field = anchor_offsets(&level, (3, 3));
        let mut taps: Vec<(f64, f64)> = (0..9)
            .map(|k| {
                let (y, x) = field.tap_position(2, 2, k, 1);
                (x - 2.0, y - 2.0)
            })
            .collect();
        taps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = Vec::new();
        for dx in [-2.0, 0.0, 2.0] {
            for dy in [-1.0, 0.0, 1.0] {
                want.push((dx, dy));
            }
        }
        assert_eq!(taps, want);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            ax in -100.0..100.0f64, ay in -100.0..100.0f64, aw in 1.0..60.0f64, ah in 1.0..60.0f64,
            tx in -100.0..100.0f64, ty in -100.0..100.0f64, lw in -4.0..4.0f64, lh in -4.0..4.0f64,
        ) {
            let a = b(ax, ay, aw, ah);
            let t = b(tx, ty, aw * lw.exp(), ah * lh.exp());
            let r = decode(&a, &encode(&a, &t));
            prop_assert!((r.x - t.x).abs() < 1e-6 && (r.y - t.y).abs() < 1e-6);
            prop_assert!((r.w - t.w).abs() < 1e-6 * t.w.max(1.0) && (r.h - t.h).abs() < 1e-6 * t.h.max(1.0));
        }

        #[test]
        fn iou_symmetric_and_bounded(
            x1 in -10.0..10.0f64, y1 in -10.0..10.0f64, w1 in 0.1..10.0f64, h1 in 0.1..10.0f64,
            x2 in -10.0..10.0f64, y2 in -10.0..10.0f64, w2 in 0.1..10.0f64, h2 in 0.1..10.0f64,
        ) {
            let (p, q) = (b(x1, y1, w1, h1), b(x2, y2, w2, h2));
            let v = iou(&p, &q);
            prop_assert_eq!(v, iou(&q, &p));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((iou(&p, &p) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_monotone_in_nested_growth(
            w in 0.5..5.0f64, h in 0.5..5.0f64, off in 0.0..3.0f64, g1 in 0.0..2.0f64, g2 in 0.0..2.0f64,
        ) {
            // fixed box and a family growing toward it: intersection grows, so IoU with a
            // box containing the whole family does not decrease
            let outer = b(0.0, 0.0, 20.0, 20.0);
            let (lo, hi) = (g1.min(g2), g1.max(g2));
            let small = b(off, 0.0, w + lo, h + lo);
            let large = b(off, 0.0, w + hi, h + hi);
            prop_assert!(iou(&outer, &large) >= iou(&outer, &small) - 1e-15);
        }

        #[test]
        fn offsets_scale_with_anchor_shape(w in 1.0..40.0f64, h in 1.0..40.0f64) {
            let level = AnchorLevel { stride: 4, base_size: 1.0, grid: (1, 1), anchors: vec![b(2.0, 2.0, w, h)] };
            let f = anchor_offsets(&level, (3, 3));
            let (y0, x0) = f.tap_position(0, 0, 0, 1);
            let (y8, x8) = f.tap_position(0, 0, 8, 1);
            prop_assert!((x0 + w / 8.0).abs() < 1e-12 && (y0 + h / 8.0).abs() < 1e-12);
            prop_assert!((x8 - w / 8.0).abs() < 1e-12 && (y8 - h / 8.0).abs() < 1e-12);
        }
    }
}
