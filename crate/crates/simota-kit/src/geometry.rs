//! Box representations, overlap measures, and affine box transforms.
//!
//! Boxes are stored center-size (`cx, cy, w, h`) in pixel units, matching the
//! decode parameterization of the grid head; corner form is computed on
//! demand. All geometry is `f64`.

use serde::{Deserialize, Serialize};

/// Minimum area (px²) a clipped box must keep to survive
/// [`clip_to_canvas`]. Removes degenerate mosaic slivers.
pub const MIN_BOX_AREA: f64 = 1.0;

/// Minimum side length (px) a clipped box must keep to survive
/// [`clip_to_canvas`].
pub const MIN_BOX_SIDE: f64 = 1.0;

/// Axis-aligned box, center-size form, pixel units.
///
/// Invariants: `w > 0`, `h > 0`, all components finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Build from corner form `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// Corner form `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    /// Whether the point lies inside the box (closed).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }
}

/// A box with a class label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(flatten)]
    pub bbox: BBox,
    pub class_id: usize,
}

impl LabeledBox {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        Self { bbox, class_id }
    }
}

/// Intersection area of two boxes, 0 when disjoint.
pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// Intersection over union, in `[0, 1]`.
///
/// Symmetric in its arguments down to the bit (all intermediate operations
/// are commutative in `(a, b)`), and exactly 1 for `iou(a, a)`: areas are
/// derived from the same corner differences the intersection uses, so the
/// self case cancels without rounding residue.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    inter / union
}

/// Generalized IoU, in `[-1, 1]`: IoU minus the enclosing-box slack ratio.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let enclosing = cw * ch;
    inter / union - (enclosing - union) / enclosing
}

/// 2x3 affine transform, row-major `[m00, m01, tx, m10, m11, ty]`:
/// `x' = m00*x + m01*y + tx`, `y' = m10*x + m11*y + ty`.
///
/// Invariant: the determinant of the 2x2 part is nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2D {
    pub m: [f64; 6],
}

impl Affine2D {
    pub fn identity() -> Self {
        Self {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [1.0, 0.0, dx, 0.0, 1.0, dy],
        }
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self {
            m: [sx, 0.0, 0.0, 0.0, sy, 0.0],
        }
    }

    /// Scale about the origin then translate by `(dx, dy)`.
    pub fn scale_translate(s: f64, dx: f64, dy: f64) -> Self {
        Self {
            m: [s, 0.0, dx, 0.0, s, dy],
        }
    }

    /// Mirror x across a canvas of the given width: `x' = width - x`.
    pub fn hflip(width: f64) -> Self {
        Self {
            m: [-1.0, 0.0, width, 0.0, 1.0, 0.0],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0] * self.m[4] - self.m[1] * self.m[3]
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0] * x + self.m[1] * y + self.m[2],
            self.m[3] * x + self.m[4] * y + self.m[5],
        )
    }

    /// `self` after `first`: `(self ∘ first)(x) = self(first(x))`.
    pub fn compose(&self, first: &Affine2D) -> Affine2D {
        let a = &self.m;
        let b = &first.m;
        Affine2D {
            m: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }
}

/// Axis-aligned bounding box of the four transformed corners of `b`.
///
/// Computed through the center and half-extents, which is algebraically the
/// corner AABB but keeps `apply_affine(identity, b) == b` bit-for-bit.
pub fn apply_affine(t: &Affine2D, b: &BBox) -> BBox {
    let m = &t.m;
    let hw = b.w / 2.0;
    let hh = b.h / 2.0;
    BBox {
        cx: m[0] * b.cx + m[1] * b.cy + m[2],
        cy: m[3] * b.cx + m[4] * b.cy + m[5],
        w: 2.0 * (m[0].abs() * hw + m[1].abs() * hh),
        h: 2.0 * (m[3].abs() * hw + m[4].abs() * hh),
    }
}

/// Intersect `b` with `[0, width] x [0, height]`.
///
/// Returns `None` when the intersection is empty, keeps less area than
/// [`MIN_BOX_AREA`], or either side drops below [`MIN_BOX_SIDE`].
pub fn clip_to_canvas(b: &BBox, width: f64, height: f64) -> Option<BBox> {
    clip_to_canvas_with(b, width, height, MIN_BOX_AREA, MIN_BOX_SIDE)
}

/// [`clip_to_canvas`] with explicit minimum area / side thresholds.
pub fn clip_to_canvas_with(
    b: &BBox,
    width: f64,
    height: f64,
    min_area: f64,
    min_side: f64,
) -> Option<BBox> {
    let (x1, y1, x2, y2) = b.corners();
    let cx1 = x1.max(0.0);
    let cy1 = y1.max(0.0);
    let cx2 = x2.min(width);
    let cy2 = y2.min(height);
    let w = cx2 - cx1;
    let h = cy2 - cy1;
    if w < min_side || h < min_side || w * h < min_area {
        return None;
    }
    Some(BBox::from_corners(cx1, cy1, cx2, cy2))
}

/// Intersect `b` with an arbitrary rectangle `(x1, y1, x2, y2)` without any
/// minimum-size filtering. `None` when the overlap has no area.
pub fn clip_to_rect(b: &BBox, rect: (f64, f64, f64, f64)) -> Option<BBox> {
    let (x1, y1, x2, y2) = b.corners();
    let cx1 = x1.max(rect.0);
    let cy1 = y1.max(rect.1);
    let cx2 = x2.min(rect.2);
    let cy2 = y2.min(rect.3);
    if cx2 <= cx1 || cy2 <= cy1 {
        return None;
    }
    Some(BBox::from_corners(cx1, cy1, cx2, cy2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Rasterization IoU oracle: counts sample points on a regular grid of
    /// the given pitch that fall in a, b, and both.
    fn raster_iou(a: &BBox, b: &BBox, step: f64) -> f64 {
        let (ax1, ay1, ax2, ay2) = a.corners();
        let (bx1, by1, bx2, by2) = b.corners();
        let x0 = ax1.min(bx1);
        let y0 = ay1.min(by1);
        let x1 = ax2.max(bx2);
        let y1 = ay2.max(by2);
        let nx = ((x1 - x0) / step).ceil() as usize;
        let ny = ((y1 - y0) / step).ceil() as usize;
        let mut in_a = 0u64;
        let mut in_b = 0u64;
        let mut in_both = 0u64;
        for iy in 0..ny {
            let y = y0 + (iy as f64 + 0.5) * step;
            for ix in 0..nx {
                let x = x0 + (ix as f64 + 0.5) * step;
                let pa = a.contains(x, y);
                let pb = b.contains(x, y);
                if pa {
                    in_a += 1;
                }
                if pb {
                    in_b += 1;
                }
                if pa && pb {
                    in_both += 1;
                }
            }
        }
        in_both as f64 / (in_a + in_b - in_both) as f64
    }

    #[test]
    fn iou_identity() {
        let b = BBox::new(3.0, 4.0, 5.0, 6.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(10.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_third_overlap_vs_raster_oracle() {
        // Unit squares with corner coords [0,0,1,1] and [0.5,0,1.5,1]:
        // intersection 0.5, union 1.5 -> exactly 1/3.
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        let b = BBox::new(1.0, 0.5, 1.0, 1.0);
        let v = iou(&a, &b);
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        let oracle = raster_iou(&a, &b, 1e-3);
        assert!((v - oracle).abs() < 2e-3, "impl {v} vs raster {oracle}");
    }

    #[test]
    fn giou_identity_and_third_case() {
        let b = BBox::new(3.0, 4.0, 5.0, 6.0);
        assert_eq!(giou(&b, &b), 1.0);
        // For the 1/3-IoU pair the enclosing box coincides with the union
        // region (area 1.5), so there is no slack and giou == iou.
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        let c = BBox::new(1.0, 0.5, 1.0, 1.0);
        assert!((giou(&a, &c) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn giou_far_separation_approaches_minus_one() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let mut prev = giou(&a, &a);
        for d in [10.0, 100.0, 1000.0, 10000.0] {
            let b = BBox::new(d, 0.0, 1.0, 1.0);
            let g = giou(&a, &b);
            assert!(g < prev);
            prev = g;
        }
        assert!(prev < -0.99);
        assert!(prev >= -1.0);
    }

    #[test]
    fn affine_identity_bit_exact() {
        let b = BBox::new(12.3, -4.5, 6.7, 8.9);
        let out = apply_affine(&Affine2D::identity(), &b);
        assert_eq!(out, b);
    }

    #[test]
    fn affine_translation() {
        let b = BBox::new(5.0, 5.0, 2.0, 3.0);
        let out = apply_affine(&Affine2D::translation(10.0, -5.0), &b);
        assert_eq!(out, BBox::new(15.0, 0.0, 2.0, 3.0));
    }

    #[test]
    fn affine_scale_about_origin() {
        let b = BBox::new(4.0, 4.0, 2.0, 2.0);
        let out = apply_affine(&Affine2D::scale(2.0, 2.0), &b);
        assert_eq!(out, BBox::new(8.0, 8.0, 4.0, 4.0));
    }

    /// Corner-transform oracle: transform all four corners explicitly and
    /// take their AABB.
    fn corner_oracle(t: &Affine2D, b: &BBox) -> BBox {
        let (x1, y1, x2, y2) = b.corners();
        let pts = [
            t.apply_point(x1, y1),
            t.apply_point(x2, y1),
            t.apply_point(x1, y2),
            t.apply_point(x2, y2),
        ];
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        BBox::from_corners(min(&xs), min(&ys), max(&xs), max(&ys))
    }

    #[test]
    fn clip_cases() {
        let inside = BBox::new(5.0, 5.0, 2.0, 2.0);
        assert_eq!(clip_to_canvas(&inside, 10.0, 10.0), Some(inside));

        let outside = BBox::new(-10.0, 5.0, 2.0, 2.0);
        assert_eq!(clip_to_canvas(&outside, 10.0, 10.0), None);

        let half = BBox::new(0.0, 5.0, 4.0, 4.0);
        let clipped = clip_to_canvas(&half, 10.0, 10.0).unwrap();
        assert_eq!(clipped, BBox::new(1.0, 5.0, 2.0, 4.0));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (
            -100.0f64..100.0,
            -100.0f64..100.0,
            0.1f64..50.0,
            0.1f64..50.0,
        )
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assert_eq!(iou(&a, &a), 1.0);
            prop_assert_eq!(giou(&a, &a), 1.0);
        }

        #[test]
        fn iou_translation_scale_invariant(
            a in arb_box(),
            b in arb_box(),
            dx in -50.0f64..50.0,
            dy in -50.0f64..50.0,
            s in 0.1f64..10.0,
        ) {
            let base = iou(&a, &b);
            let t = |b: &BBox| BBox::new(s * (b.cx + dx), s * (b.cy + dy), s * b.w, s * b.h);
            prop_assert!((iou(&t(&a), &t(&b)) - base).abs() < 1e-9);
        }

        #[test]
        fn giou_never_exceeds_iou(a in arb_box(), b in arb_box()) {
            prop_assert!(giou(&a, &b) <= iou(&a, &b) + 1e-15);
            prop_assert!(giou(&a, &b) >= -1.0);
            prop_assert!(iou(&a, &b) <= 1.0);
        }

        #[test]
        fn affine_matches_corner_oracle(
            b in arb_box(),
            sx in prop::sample::select(vec![-2.0f64, -0.5, 0.5, 1.0, 3.0]),
            sy in prop::sample::select(vec![-2.0f64, -0.5, 0.5, 1.0, 3.0]),
            dx in -20.0f64..20.0,
            dy in -20.0f64..20.0,
        ) {
            let t = Affine2D { m: [sx, 0.0, dx, 0.0, sy, dy] };
            let got = apply_affine(&t, &b);
            let want = corner_oracle(&t, &b);
            prop_assert!((got.cx - want.cx).abs() < 1e-9);
            prop_assert!((got.cy - want.cy).abs() < 1e-9);
            prop_assert!((got.w - want.w).abs() < 1e-9);
            prop_assert!((got.h - want.h).abs() < 1e-9);
        }

        #[test]
        fn clip_never_grows_and_stays_inside(b in arb_box()) {
            if let Some(c) = clip_to_canvas(&b, 50.0, 50.0) {
                prop_assert!(c.area() <= b.area() + 1e-12);
                let (x1, y1, x2, y2) = c.corners();
                prop_assert!(x1 >= -1e-12 && y1 >= -1e-12);
                prop_assert!(x2 <= 50.0 + 1e-12 && y2 <= 50.0 + 1e-12);
            }
        }
    }
}
