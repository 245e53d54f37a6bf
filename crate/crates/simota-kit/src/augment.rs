//! Mosaic, scale-jittered MixUp, horizontal flip, and color jitter over
//! scenes, with exact box bookkeeping.
//!
//! Every geometric op records, per input scene, the affine it applied plus
//! the rectangle the pasted pixels were clipped to. Output gt lists are
//! produced by [`replay`]ing those records, so replaying them again
//! reproduces the output boxes bit-for-bit. Pixel resampling is nearest
//! neighbor, which keeps the per-pixel oracles exact.
//!
//! Randomness: each op consumes draws from the caller's [`SplitMix64`] in a
//! fixed, documented order, so a seed pins outputs byte-for-byte.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_affine, clip_to_canvas, clip_to_rect, Affine2D, BBox, LabeledBox};
use crate::rng::SplitMix64;
use crate::scene::{Image, Scene};

/// Fill value for canvas regions no source pixel lands on.
pub const PAD_VALUE: u8 = 114;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    /// Uniform range the per-image scale factors are drawn from.
    pub scale_jitter: (f64, f64),
    pub mixup_enabled: bool,
    /// Uniform range of the mixup blend weight `beta`.
    pub mixup_blend: (f64, f64),
    pub flip_prob: f64,
    /// `(brightness delta range ±, contrast factor range ±)`.
    pub color_jitter: (f64, f64),
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self::small_preset()
    }
}

impl AugConfig {
    /// Small-model preset: no mixup, mosaic scale jitter `[0.5, 1.5]`.
    pub fn small_preset() -> Self {
        Self {
            scale_jitter: (0.5, 1.5),
            mixup_enabled: false,
            mixup_blend: (0.4, 0.6),
            flip_prob: 0.5,
            color_jitter: (32.0, 0.5),
            seed: 0,
        }
    }

    /// Large-model preset: mixup on, mosaic scale jitter `[0.1, 2.0]`.
    pub fn large_preset() -> Self {
        Self {
            scale_jitter: (0.1, 2.0),
            mixup_enabled: true,
            ..Self::small_preset()
        }
    }
}

/// The transform one input scene went through: an affine into output
/// coordinates plus the rectangle (output coordinates) its pixels were
/// clipped to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordedTransform {
    pub affine: Affine2D,
    pub clip_rect: (f64, f64, f64, f64),
}

impl RecordedTransform {
    pub fn identity(width: f64, height: f64) -> Self {
        Self {
            affine: Affine2D::identity(),
            clip_rect: (0.0, 0.0, width, height),
        }
    }
}

/// Map an input box through a recorded transform: affine, clip to the
/// pasted region, then clip to the output canvas with the minimum-size
/// filters. This is exactly how the ops build their output gt lists.
pub fn replay(
    rt: &RecordedTransform,
    b: &BBox,
    out_width: f64,
    out_height: f64,
) -> Option<BBox> {
    let moved = apply_affine(&rt.affine, b);
    let clipped = clip_to_rect(&moved, rt.clip_rect)?;
    clip_to_canvas(&clipped, out_width, out_height)
}

fn round_half_up(x: f64) -> u8 {
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Nearest-neighbor sample of a source image scaled by `scale` and pasted
/// with its top-left corner at `(ox, oy)`; `None` where no source pixel
/// lands.
fn sample_scaled(img: &Image, scale: f64, ox: f64, oy: f64, x: usize, y: usize) -> Option<[u8; 3]> {
    let sx = ((x as f64 + 0.5 - ox) / scale).floor();
    let sy = ((y as f64 + 0.5 - oy) / scale).floor();
    if sx < 0.0 || sy < 0.0 || sx >= img.width as f64 || sy >= img.height as f64 {
        return None;
    }
    Some(img.get(sx as usize, sy as usize))
}

/// Placement drawn for one mosaic composition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosaicGeometry {
    /// Split point of the `2H x 2W` workspace, pixels.
    pub center: (f64, f64),
    /// Per-scene scale factors, scene order.
    pub scales: [f64; 4],
    /// Top-left corner of the final crop within the workspace.
    pub crop: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosaicResult {
    pub scene: Scene,
    /// The pre-crop `2H x 2W` composite, boxes included.
    pub workspace: Scene,
    /// Input-to-output transforms, scene order.
    pub transforms: [RecordedTransform; 4],
    /// `(input scene, input gt)` for each output gt, in order.
    pub provenance: Vec<(usize, usize)>,
    pub geometry: MosaicGeometry,
}

/// Tile four scenes into a jittered 2x2 workspace and crop to `out_size`.
///
/// Scene `i` goes to quadrant `i` (TL, TR, BL, BR), scaled by a drawn factor
/// and anchored at the split point (its corner nearest the split touches
/// it). Draw order: center x fraction, center y fraction, the four scale
/// factors in scene order, crop x, crop y.
pub fn mosaic(
    scenes: &[Scene],
    out_size: (usize, usize),
    cfg: &AugConfig,
    rng: &mut SplitMix64,
) -> Result<MosaicResult> {
    if scenes.len() != 4 {
        return Err(Error::invalid(format!(
            "mosaic needs 4 scenes, got {}",
            scenes.len()
        )));
    }
    let (out_h, out_w) = out_size;
    let fx = 0.25 + 0.5 * rng.next_f64();
    let fy = 0.25 + 0.5 * rng.next_f64();
    let center = (fx * (2 * out_w) as f64, fy * (2 * out_h) as f64);
    let mut scales = [0.0; 4];
    for s in &mut scales {
        *s = rng.uniform(cfg.scale_jitter.0, cfg.scale_jitter.1);
    }
    let crop = (
        rng.below(out_w as u64 + 1) as usize,
        rng.below(out_h as u64 + 1) as usize,
    );
    mosaic_with_geometry(
        scenes,
        out_size,
        &MosaicGeometry {
            center,
            scales,
            crop,
        },
    )
}

/// [`mosaic`] with explicit placement, for deterministic composition.
pub fn mosaic_with_geometry(
    scenes: &[Scene],
    out_size: (usize, usize),
    geom: &MosaicGeometry,
) -> Result<MosaicResult> {
    if scenes.len() != 4 {
        return Err(Error::invalid("mosaic needs 4 scenes"));
    }
    let (out_h, out_w) = out_size;
    let (ws_w, ws_h) = (2 * out_w, 2 * out_h);
    let cx = geom.center.0.round().clamp(0.0, ws_w as f64);
    let cy = geom.center.1.round().clamp(0.0, ws_h as f64);
    let (cxi, cyi) = (cx as usize, cy as usize);

    // Quadrant rectangles in workspace pixels: TL, TR, BL, BR.
    let quadrants = [
        (0, 0, cxi, cyi),
        (cxi, 0, ws_w, cyi),
        (0, cyi, cxi, ws_h),
        (cxi, cyi, ws_w, ws_h),
    ];
    // Paste origin of each scaled scene: the corner nearest the split point
    // touches it.
    let mut origins = [(0.0, 0.0); 4];
    for i in 0..4 {
        let sw = scenes[i].width() as f64 * geom.scales[i];
        let sh = scenes[i].height() as f64 * geom.scales[i];
        origins[i] = match i {
            0 => (cx - sw, cy - sh),
            1 => (cx, cy - sh),
            2 => (cx - sw, cy),
            _ => (cx, cy),
        };
    }

    let mut ws_img = Image::new_filled(ws_w, ws_h, [PAD_VALUE; 3]);
    for i in 0..4 {
        let (qx1, qy1, qx2, qy2) = quadrants[i];
        let (ox, oy) = origins[i];
        for y in qy1..qy2 {
            for x in qx1..qx2 {
                if let Some(rgb) = sample_scaled(&scenes[i].image, geom.scales[i], ox, oy, x, y) {
                    ws_img.set(x, y, rgb);
                }
            }
        }
    }

    // Workspace-coordinate transforms (for the pre-crop scene).
    let ws_transforms: Vec<RecordedTransform> = (0..4)
        .map(|i| RecordedTransform {
            affine: Affine2D::scale_translate(geom.scales[i], origins[i].0, origins[i].1),
            clip_rect: (
                quadrants[i].0 as f64,
                quadrants[i].1 as f64,
                quadrants[i].2 as f64,
                quadrants[i].3 as f64,
            ),
        })
        .collect();
    let mut ws_gts = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        for gt in &scene.gts {
            if let Some(b) = replay(&ws_transforms[i], &gt.bbox, ws_w as f64, ws_h as f64) {
                ws_gts.push(LabeledBox::new(b, gt.class_id));
            }
        }
    }
    let workspace = Scene {
        id: format!("mosaic-workspace-{}", scenes[0].id),
        image: ws_img.clone(),
        gts: ws_gts,
    };

    // Crop to the output window.
    let (crop_x, crop_y) = geom.crop;
    let mut out_img = Image::new_filled(out_w, out_h, [PAD_VALUE; 3]);
    for y in 0..out_h {
        for x in 0..out_w {
            out_img.set(x, y, ws_img.get(x + crop_x, y + crop_y));
        }
    }
    let transforms: [RecordedTransform; 4] = std::array::from_fn(|i| RecordedTransform {
        affine: Affine2D::translation(-(crop_x as f64), -(crop_y as f64))
            .compose(&ws_transforms[i].affine),
        clip_rect: (
            quadrants[i].0 as f64 - crop_x as f64,
            quadrants[i].1 as f64 - crop_y as f64,
            quadrants[i].2 as f64 - crop_x as f64,
            quadrants[i].3 as f64 - crop_y as f64,
        ),
    });
    let mut gts = Vec::new();
    let mut provenance = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        for (k, gt) in scene.gts.iter().enumerate() {
            if let Some(b) = replay(&transforms[i], &gt.bbox, out_w as f64, out_h as f64) {
                gts.push(LabeledBox::new(b, gt.class_id));
                provenance.push((i, k));
            }
        }
    }

    Ok(MosaicResult {
        scene: Scene {
            id: format!("mosaic-{}", scenes[0].id),
            image: out_img,
            gts,
        },
        workspace,
        transforms,
        provenance,
        geometry: *geom,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixupResult {
    pub scene: Scene,
    pub transforms: [RecordedTransform; 2],
    pub beta: f64,
    pub provenance: Vec<(usize, usize)>,
}

/// Blend two same-size scenes after jittering each by an independent scale
/// factor; the gt list is the union of both transformed lists.
///
/// Pixels: `out = round_half_up(beta*a + (1-beta)*b)` per channel, with
/// [`PAD_VALUE`] where a scaled image does not cover the canvas. Draw
/// order: scale of `a`, scale of `b`, `beta`.
pub fn mixup(
    a: &Scene,
    b: &Scene,
    cfg: &AugConfig,
    rng: &mut SplitMix64,
) -> Result<MixupResult> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::invalid("mixup inputs must share a canvas size"));
    }
    let (w, h) = (a.width(), a.height());
    let scale_a = rng.uniform(cfg.scale_jitter.0, cfg.scale_jitter.1);
    let scale_b = rng.uniform(cfg.scale_jitter.0, cfg.scale_jitter.1);
    let beta = rng.uniform(cfg.mixup_blend.0, cfg.mixup_blend.1);

    let mut img = Image::new_filled(w, h, [PAD_VALUE; 3]);
    for y in 0..h {
        for x in 0..w {
            let pa = sample_scaled(&a.image, scale_a, 0.0, 0.0, x, y).unwrap_or([PAD_VALUE; 3]);
            let pb = sample_scaled(&b.image, scale_b, 0.0, 0.0, x, y).unwrap_or([PAD_VALUE; 3]);
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                rgb[c] = round_half_up(beta * pa[c] as f64 + (1.0 - beta) * pb[c] as f64);
            }
            img.set(x, y, rgb);
        }
    }

    let transforms = [
        RecordedTransform {
            affine: Affine2D::scale(scale_a, scale_a),
            clip_rect: (0.0, 0.0, w as f64 * scale_a, h as f64 * scale_a),
        },
        RecordedTransform {
            affine: Affine2D::scale(scale_b, scale_b),
            clip_rect: (0.0, 0.0, w as f64 * scale_b, h as f64 * scale_b),
        },
    ];
    let mut gts = Vec::new();
    let mut provenance = Vec::new();
    for (i, scene) in [a, b].into_iter().enumerate() {
        for (k, gt) in scene.gts.iter().enumerate() {
            if let Some(bx) = replay(&transforms[i], &gt.bbox, w as f64, h as f64) {
                gts.push(LabeledBox::new(bx, gt.class_id));
                provenance.push((i, k));
            }
        }
    }

    Ok(MixupResult {
        scene: Scene {
            id: format!("mixup-{}-{}", a.id, b.id),
            image: img,
            gts,
        },
        transforms,
        beta,
        provenance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlipResult {
    pub scene: Scene,
    pub transform: RecordedTransform,
    pub flipped: bool,
}

/// Mirror the image columns with probability `flip_prob`, mapping box
/// centers `cx -> W - cx`. One draw: the flip decision.
pub fn hflip(s: &Scene, rng: &mut SplitMix64, cfg: &AugConfig) -> FlipResult {
    let (w, h) = (s.width(), s.height());
    let flipped = rng.coin(cfg.flip_prob);
    if !flipped {
        return FlipResult {
            scene: s.clone(),
            transform: RecordedTransform::identity(w as f64, h as f64),
            flipped,
        };
    }
    let mut img = Image::new_filled(w, h, [0; 3]);
    for y in 0..h {
        for x in 0..w {
            img.set(x, y, s.image.get(w - 1 - x, y));
        }
    }
    let transform = RecordedTransform {
        affine: Affine2D::hflip(w as f64),
        clip_rect: (0.0, 0.0, w as f64, h as f64),
    };
    let gts = s
        .gts
        .iter()
        .filter_map(|gt| {
            replay(&transform, &gt.bbox, w as f64, h as f64)
                .map(|b| LabeledBox::new(b, gt.class_id))
        })
        .collect();
    FlipResult {
        scene: Scene {
            id: format!("hflip-{}", s.id),
            image: img,
            gts,
        },
        transform,
        flipped,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorJitterResult {
    pub scene: Scene,
    pub brightness: f64,
    pub contrast: f64,
}

/// Per-pixel `clamp(contrast*(p - 128) + 128 + brightness)`; boxes are
/// untouched. Draw order: brightness delta, contrast factor.
pub fn color_jitter(s: &Scene, rng: &mut SplitMix64, cfg: &AugConfig) -> ColorJitterResult {
    let (b_range, c_range) = cfg.color_jitter;
    let brightness = rng.uniform(-b_range, b_range);
    let contrast = rng.uniform(1.0 - c_range, 1.0 + c_range);
    let mut img = s.image.clone();
    for v in &mut img.data {
        *v = round_half_up(contrast * (*v as f64 - 128.0) + 128.0 + brightness);
    }
    ColorJitterResult {
        scene: Scene {
            id: format!("jitter-{}", s.id),
            image: img,
            gts: s.gts.clone(),
        },
        brightness,
        contrast,
    }
}
