//! FPN grids, anchor points, anchor-free box encode/decode, scale-range
//! level designation, and head output-layout accounting.
//!
//! One anchor point per grid cell per level. Decoding follows the
//! anchor-free convention: the two center offsets are relative to the
//! left-top corner of the grid cell, width and height are exponentials of
//! the raw offsets times the stride.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, LabeledBox};

/// Guard on `exp(tw)`/`exp(th)` during decode; anything above this many grid
/// cells is reported as an overflow instead of poisoning downstream IoU.
pub const DECODE_OVERFLOW_FACTOR: f64 = 1e8;

/// Strides and per-level scale ranges of the feature pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnSpec {
    /// Pixels per grid cell, strictly increasing.
    pub strides: Vec<usize>,
    /// `(height, width)` in pixels, divisible by every stride.
    pub input_size: (usize, usize),
    /// Per-level `(lo, hi]` object-size ranges; `hi` of the last level is
    /// `f64::INFINITY`.
    pub scale_ranges: Vec<(f64, f64)>,
}

impl FpnSpec {
    pub const DEFAULT_STRIDES: [usize; 3] = [8, 16, 32];

    pub fn new(
        strides: Vec<usize>,
        input_size: (usize, usize),
        scale_ranges: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if strides.is_empty() {
            return Err(Error::invalid("strides must be non-empty"));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("strides must be strictly increasing"));
        }
        if strides.contains(&0) {
            return Err(Error::invalid("strides must be positive"));
        }
        let (h, w) = input_size;
        for &s in &strides {
            if h % s != 0 || w % s != 0 {
                return Err(Error::invalid(format!(
                    "input size {h}x{w} not divisible by stride {s}"
                )));
            }
        }
        if scale_ranges.len() != strides.len() {
            return Err(Error::invalid("one scale range per level required"));
        }
        for (i, &(lo, hi)) in scale_ranges.iter().enumerate() {
            if lo >= hi {
                return Err(Error::invalid(format!("scale range {i} is empty")));
            }
            if i > 0 && scale_ranges[i - 1].1 != lo {
                return Err(Error::invalid("scale ranges must be contiguous"));
            }
        }
        if scale_ranges.last().unwrap().1 != f64::INFINITY {
            return Err(Error::invalid("last scale range must be unbounded"));
        }
        Ok(Self {
            strides,
            input_size,
            scale_ranges,
        })
    }

    /// Three-level pyramid with strides `[8, 16, 32]` and scale ranges
    /// `(0, 64], (64, 128], (128, inf)`.
    pub fn with_defaults(input_size: (usize, usize)) -> Result<Self> {
        Self::new(
            Self::DEFAULT_STRIDES.to_vec(),
            input_size,
            vec![(0.0, 64.0), (64.0, 128.0), (128.0, f64::INFINITY)],
        )
    }

    /// Evenly split scale ranges for an arbitrary stride list: level i gets
    /// `(64*2^(i-1), 64*2^i]` with the first starting at 0 and the last
    /// unbounded.
    pub fn with_auto_ranges(strides: Vec<usize>, input_size: (usize, usize)) -> Result<Self> {
        let n = strides.len();
        let mut ranges = Vec::with_capacity(n);
        let mut lo = 0.0;
        for i in 0..n {
            let hi = if i + 1 == n {
                f64::INFINITY
            } else {
                64.0 * (1u32 << i) as f64
            };
            ranges.push((lo, hi));
            lo = hi;
        }
        Self::new(strides, input_size, ranges)
    }

    /// `(rows, cols)` of the level's grid.
    pub fn grid_dims(&self, level: usize) -> (usize, usize) {
        let s = self.strides[level];
        (self.input_size.0 / s, self.input_size.1 / s)
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }

    /// Total anchors over all levels.
    pub fn anchor_count(&self) -> usize {
        (0..self.num_levels())
            .map(|l| {
                let (gh, gw) = self.grid_dims(l);
                gh * gw
            })
            .sum()
    }

    /// Index of the first anchor of the level in [`build_anchors`] order.
    pub fn level_offset(&self, level: usize) -> usize {
        (0..level)
            .map(|l| {
                let (gh, gw) = self.grid_dims(l);
                gh * gw
            })
            .sum()
    }
}

/// A grid location on one FPN level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorPoint {
    pub level: usize,
    pub gx: usize,
    pub gy: usize,
    pub stride: usize,
}

impl AnchorPoint {
    /// Center of the grid cell in pixels.
    pub fn cell_center(&self) -> (f64, f64) {
        let s = self.stride as f64;
        ((self.gx as f64 + 0.5) * s, (self.gy as f64 + 0.5) * s)
    }

    /// The grid cell as a box.
    pub fn cell_box(&self) -> BBox {
        let (cx, cy) = self.cell_center();
        BBox::new(cx, cy, self.stride as f64, self.stride as f64)
    }
}

/// One anchor per grid cell per level, row-major within a level, levels in
/// stride order.
pub fn build_anchors(spec: &FpnSpec) -> Vec<AnchorPoint> {
    let mut anchors = Vec::with_capacity(spec.anchor_count());
    for (level, &stride) in spec.strides.iter().enumerate() {
        let (gh, gw) = spec.grid_dims(level);
        for gy in 0..gh {
            for gx in 0..gw {
                anchors.push(AnchorPoint {
                    level,
                    gx,
                    gy,
                    stride,
                });
            }
        }
    }
    anchors
}

/// Raw per-anchor network outputs: box offsets plus objectness and class
/// logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPrediction {
    /// `(tx, ty, tw, th)` unitless offsets.
    pub t: [f64; 4],
    pub obj_logit: f64,
    pub cls_logits: Vec<f64>,
}

impl RawPrediction {
    pub fn new(t: [f64; 4], obj_logit: f64, cls_logits: Vec<f64>) -> Self {
        Self {
            t,
            obj_logit,
            cls_logits,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.t.iter().all(|v| v.is_finite())
            && self.obj_logit.is_finite()
            && self.cls_logits.iter().all(|v| v.is_finite())
    }
}

/// Decoded form of a [`RawPrediction`]: a box plus probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPrediction {
    pub bbox: BBox,
    pub obj_prob: f64,
    pub cls_probs: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decode raw offsets at an anchor:
/// `cx = (gx + tx)*stride`, `cy = (gy + ty)*stride`,
/// `w = exp(tw)*stride`, `h = exp(th)*stride`; probabilities via logistic.
pub fn decode(p: &RawPrediction, a: &AnchorPoint) -> Result<DecodedPrediction> {
    decode_indexed(p, a, 0)
}

/// [`decode`] with an anchor index carried into the overflow error.
pub fn decode_indexed(p: &RawPrediction, a: &AnchorPoint, index: usize) -> Result<DecodedPrediction> {
    if !p.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite prediction at anchor {index}"
        )));
    }
    let s = a.stride as f64;
    let ew = p.t[2].exp();
    let eh = p.t[3].exp();
    if ew > DECODE_OVERFLOW_FACTOR {
        return Err(Error::DecodeOverflow {
            anchor: index,
            offset: p.t[2],
        });
    }
    if eh > DECODE_OVERFLOW_FACTOR {
        return Err(Error::DecodeOverflow {
            anchor: index,
            offset: p.t[3],
        });
    }
    Ok(DecodedPrediction {
        bbox: BBox {
            cx: (a.gx as f64 + p.t[0]) * s,
            cy: (a.gy as f64 + p.t[1]) * s,
            w: ew * s,
            h: eh * s,
        },
        obj_prob: sigmoid(p.obj_logit),
        cls_probs: p.cls_logits.iter().map(|&l| sigmoid(l)).collect(),
    })
}

/// Exact inverse of the decode box formula.
pub fn encode(b: &BBox, a: &AnchorPoint) -> [f64; 4] {
    let s = a.stride as f64;
    [
        b.cx / s - a.gx as f64,
        b.cy / s - a.gy as f64,
        (b.w / s).ln(),
        (b.h / s).ln(),
    ]
}

/// The unique level whose `(lo, hi]` range contains `max(gt.w, gt.h)`.
/// A boundary value belongs to the lower level; the last level catches all
/// larger objects.
pub fn assign_fpn_level(gt: &LabeledBox, spec: &FpnSpec) -> usize {
    let size = gt.bbox.w.max(gt.bbox.h);
    for (level, &(lo, hi)) in spec.scale_ranges.iter().enumerate() {
        if size > lo && size <= hi {
            return level;
        }
    }
    spec.num_levels() - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Single output plane of `4 + 1 + C` channels per level.
    Coupled,
    /// Separate regression (4), objectness (1) and classification (C)
    /// branches per level.
    Decoupled,
}

/// Shape-level accounting of head outputs and their flattening to per-anchor
/// attribute rows `[tx, ty, tw, th, obj, cls...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout {
    pub kind: HeadKind,
    pub num_classes: usize,
    /// Per level: `(grid_h, grid_w, branch channel counts)`.
    pub levels: Vec<(usize, usize, Vec<usize>)>,
}

/// Build the layout for the given head kind over the pyramid.
pub fn head_layout(num_classes: usize, kind: HeadKind, spec: &FpnSpec) -> HeadLayout {
    let levels = (0..spec.num_levels())
        .map(|l| {
            let (gh, gw) = spec.grid_dims(l);
            let channels = match kind {
                HeadKind::Coupled => vec![4 + 1 + num_classes],
                HeadKind::Decoupled => vec![4, 1, num_classes],
            };
            (gh, gw, channels)
        })
        .collect();
    HeadLayout {
        kind,
        num_classes,
        levels,
    }
}

impl HeadLayout {
    /// Flattened per-anchor attribute count, `4 + 1 + num_classes` for both
    /// head kinds.
    pub fn attrs_per_anchor(&self) -> usize {
        4 + 1 + self.num_classes
    }

    /// Number of values a branch plane holds at a level.
    pub fn branch_len(&self, level: usize, branch: usize) -> usize {
        let (gh, gw, ref ch) = self.levels[level];
        ch[branch] * gh * gw
    }

    /// Flatten channel-major branch planes of one level into anchor-major
    /// attribute rows.
    ///
    /// `branches[b][(c*gh + y)*gw + x]` is the value of channel `c` of branch
    /// `b` at grid cell `(y, x)`; the output row of anchor `(y, x)` holds the
    /// attributes in branch-then-channel order, which yields
    /// `[tx, ty, tw, th, obj, cls...]` for both head kinds.
    pub fn flatten_level(&self, level: usize, branches: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (gh, gw, ref ch) = self.levels[level];
        if branches.len() != ch.len() {
            return Err(Error::invalid("branch count mismatch"));
        }
        for (b, plane) in branches.iter().enumerate() {
            if plane.len() != ch[b] * gh * gw {
                return Err(Error::invalid("branch plane size mismatch"));
            }
        }
        let attrs = self.attrs_per_anchor();
        let mut out = vec![0.0; gh * gw * attrs];
        for y in 0..gh {
            for x in 0..gw {
                let row = (y * gw + x) * attrs;
                let mut attr = 0;
                for (b, plane) in branches.iter().enumerate() {
                    for c in 0..ch[b] {
                        out[row + attr] = plane[(c * gh + y) * gw + x];
                        attr += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`HeadLayout::flatten_level`].
    pub fn unflatten_level(&self, level: usize, flat: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (gh, gw, ref ch) = self.levels[level];
        let attrs = self.attrs_per_anchor();
        if flat.len() != gh * gw * attrs {
            return Err(Error::invalid("flat tensor size mismatch"));
        }
        let mut branches: Vec<Vec<f64>> = ch.iter().map(|&c| vec![0.0; c * gh * gw]).collect();
        for y in 0..gh {
            for x in 0..gw {
                let row = (y * gw + x) * attrs;
                let mut attr = 0;
                for (b, plane) in branches.iter_mut().enumerate() {
                    for c in 0..ch[b] {
                        plane[(c * gh + y) * gw + x] = flat[row + attr];
                        attr += 1;
                    }
                }
            }
        }
        Ok(branches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn spec_64() -> FpnSpec {
        FpnSpec::with_defaults((64, 64)).unwrap()
    }

    #[test]
    fn anchor_count_formula() {
        // 64x64 with strides [8,16,32]: 64 + 16 + 4 anchors.
        let anchors = build_anchors(&spec_64());
        assert_eq!(anchors.len(), 84);
        assert_eq!(spec_64().anchor_count(), 84);

        let single = FpnSpec::new(vec![32], (32, 32), vec![(0.0, f64::INFINITY)]).unwrap();
        let a = build_anchors(&single);
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].gx, a[0].gy), (0, 0));
    }

    #[test]
    fn anchor_ordering_stable() {
        let a = build_anchors(&spec_64());
        let b = build_anchors(&spec_64());
        assert_eq!(a, b);
        // Row-major within level, levels in stride order.
        assert_eq!(a[0], AnchorPoint { level: 0, gx: 0, gy: 0, stride: 8 });
        assert_eq!(a[1], AnchorPoint { level: 0, gx: 1, gy: 0, stride: 8 });
        assert_eq!(a[8], AnchorPoint { level: 0, gx: 0, gy: 1, stride: 8 });
        assert_eq!(a[64], AnchorPoint { level: 1, gx: 0, gy: 0, stride: 16 });
    }

    #[test]
    fn decode_identity_offsets() {
        let a = AnchorPoint { level: 0, gx: 3, gy: 2, stride: 8 };
        let p = RawPrediction::new([0.0; 4], 0.0, vec![0.0]);
        let d = decode(&p, &a).unwrap();
        assert_eq!(d.bbox, BBox::new(24.0, 16.0, 8.0, 8.0));
        assert_eq!(d.obj_prob, 0.5);
    }

    #[test]
    fn decode_formula_oracle() {
        let a = AnchorPoint { level: 0, gx: 3, gy: 2, stride: 8 };
        let p = RawPrediction::new([0.5, 0.5, 0.0, 0.0], 0.0, vec![0.0]);
        let d = decode(&p, &a).unwrap();
        assert_eq!(d.bbox, BBox::new(28.0, 20.0, 8.0, 8.0));
    }

    #[test]
    fn decode_overflow_guard() {
        let a = AnchorPoint { level: 0, gx: 0, gy: 0, stride: 8 };
        let p = RawPrediction::new([0.0, 0.0, 25.0, 0.0], 0.0, vec![]);
        match decode(&p, &a) {
            Err(Error::DecodeOverflow { offset, .. }) => assert_eq!(offset, 25.0),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn encode_known_values() {
        let a = AnchorPoint { level: 0, gx: 3, gy: 2, stride: 8 };
        assert_eq!(encode(&BBox::new(24.0, 16.0, 8.0, 8.0), &a), [0.0; 4]);
        let t = encode(&BBox::new(28.0, 20.0, 16.0, 8.0), &a);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[1], 0.5);
        assert!((t[2] - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(t[3], 0.0);
    }

    #[test]
    fn fpn_level_ranges() {
        let spec = spec_64();
        let gt = |w: f64, h: f64| LabeledBox::new(BBox::new(32.0, 32.0, w, h), 0);
        assert_eq!(assign_fpn_level(&gt(40.0, 30.0), &spec), 0);
        // Boundary belongs to the lower level: (0, 64] contains 64.
        assert_eq!(assign_fpn_level(&gt(64.0, 64.0), &spec), 0);
        assert_eq!(assign_fpn_level(&gt(64.0001, 20.0), &spec), 1);
        assert_eq!(assign_fpn_level(&gt(500.0, 500.0), &spec), 2);
    }

    #[test]
    fn head_attr_counts() {
        let spec = spec_64();
        assert_eq!(head_layout(80, HeadKind::Coupled, &spec).attrs_per_anchor(), 85);
        assert_eq!(head_layout(80, HeadKind::Decoupled, &spec).attrs_per_anchor(), 85);
        assert_eq!(head_layout(1, HeadKind::Coupled, &spec).attrs_per_anchor(), 6);
    }

    #[test]
    fn coupled_and_decoupled_flatten_identically() {
        let spec = spec_64();
        let num_classes = 3;
        let coupled = head_layout(num_classes, HeadKind::Coupled, &spec);
        let decoupled = head_layout(num_classes, HeadKind::Decoupled, &spec);
        for level in 0..spec.num_levels() {
            let (gh, gw, _) = coupled.levels[level];
            let attrs = coupled.attrs_per_anchor();
            // Label every value by (attribute, cell) so orderings are
            // distinguishable.
            let value = |c: usize, y: usize, x: usize| (c * gh * gw + y * gw + x) as f64;
            let coupled_plane: Vec<f64> = (0..attrs)
                .flat_map(|c| (0..gh).flat_map(move |y| (0..gw).map(move |x| value(c, y, x))))
                .collect();
            let dec_branches: Vec<Vec<f64>> = [(0usize, 4usize), (4, 1), (5, num_classes)]
                .iter()
                .map(|&(c0, n)| {
                    (0..n)
                        .flat_map(|c| {
                            (0..gh).flat_map(move |y| (0..gw).map(move |x| value(c0 + c, y, x)))
                        })
                        .collect()
                })
                .collect();
            let f1 = coupled.flatten_level(level, &[coupled_plane]).unwrap();
            let f2 = decoupled.flatten_level(level, &dec_branches).unwrap();
            assert_eq!(f1, f2);
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            gx in 0usize..8,
            gy in 0usize..8,
            cx in 0.1f64..63.9,
            cy in 0.1f64..63.9,
            w in 0.5f64..200.0,
            h in 0.5f64..200.0,
        ) {
            let a = AnchorPoint { level: 0, gx, gy, stride: 8 };
            let b = BBox::new(cx, cy, w, h);
            let t = encode(&b, &a);
            let p = RawPrediction::new(t, 0.0, vec![]);
            let d = decode(&p, &a).unwrap().bbox;
            prop_assert!((d.cx - b.cx).abs() < 1e-9);
            prop_assert!((d.cy - b.cy).abs() < 1e-9);
            prop_assert!((d.w - b.w).abs() < 1e-9);
            prop_assert!((d.h - b.h).abs() < 1e-9);
        }

        #[test]
        fn decode_encode_round_trip(
            tx in -3.0f64..3.0,
            ty in -3.0f64..3.0,
            tw in -20.0f64..18.0,
            th in -20.0f64..18.0,
        ) {
            let a = AnchorPoint { level: 1, gx: 2, gy: 3, stride: 16 };
            let p = RawPrediction::new([tx, ty, tw, th], 0.0, vec![]);
            let d = decode(&p, &a).unwrap();
            let t = encode(&d.bbox, &a);
            prop_assert!((t[0] - tx).abs() < 1e-9);
            prop_assert!((t[1] - ty).abs() < 1e-9);
            prop_assert!((t[2] - tw).abs() < 1e-9);
            prop_assert!((t[3] - th).abs() < 1e-9);
        }

        #[test]
        fn fpn_level_total_and_matches_lookup(w in 0.01f64..1000.0, h in 0.01f64..1000.0) {
            let spec = spec_64();
            let gt = LabeledBox::new(BBox::new(0.0, 0.0, w, h), 0);
            let level = assign_fpn_level(&gt, &spec);
            // Range-lookup oracle.
            let size = w.max(h);
            let (lo, hi) = spec.scale_ranges[level];
            prop_assert!(size > lo && size <= hi);
        }

        #[test]
        fn flatten_round_trip(seed in any::<u64>(), level in 0usize..3) {
            let spec = spec_64();
            let layout = head_layout(4, HeadKind::Decoupled, &spec);
            let mut rng = SplitMix64::new(seed);
            let branches: Vec<Vec<f64>> = (0..3)
                .map(|b| (0..layout.branch_len(level, b)).map(|_| rng.next_f64()).collect())
                .collect();
            let flat = layout.flatten_level(level, &branches).unwrap();
            let back = layout.unflatten_level(level, &flat).unwrap();
            prop_assert_eq!(branches, back);
        }
    }
}
