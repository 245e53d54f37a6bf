//! Simplified COCO-style AP/mAP: greedy detection-gt matching, all-point
//! interpolated average precision, and the mean over classes and IoU
//! thresholds with AP50/AP75 slices.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, LabeledBox};
use crate::postprocess::Detection;

/// Precision-recall curve of one class at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    /// `(recall, precision)` points in detection-rank order; recall is
    /// non-decreasing.
    pub points: Vec<(f64, f64)>,
    /// All-point interpolated area under the curve, in `[0, 1]`.
    pub ap: f64,
}

/// Greedy matching flags, score-descending: each detection matches the
/// highest-IoU unmatched same-class gt with `IoU >= threshold` (TP), else it
/// is a FP.
///
/// Detections are ranked internally by `(score desc, anchor_index asc)`; the
/// returned flags follow that order.
pub fn match_detections(dets: &[Detection], gts: &[LabeledBox], iou_threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(dets[a].anchor_index.cmp(&dets[b].anchor_index))
    });
    let mut gt_used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] || gt.class_id != d.class_id {
                continue;
            }
            let ov = iou(&d.bbox, &gt.bbox);
            if ov >= iou_threshold {
                best = match best {
                    Some((_, b)) if b >= ov => best,
                    _ => Some((gi, ov)),
                };
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// All-point interpolated AP from rank-ordered TP/FP flags.
///
/// The precision envelope is made monotone non-increasing and integrated
/// over recall. `num_gts == 0` with detections present gives AP 0.
pub fn average_precision(flags: &[bool], num_gts: usize) -> PRCurve {
    if num_gts == 0 || flags.is_empty() {
        return PRCurve {
            points: Vec::new(),
            ap: 0.0,
        };
    }
    let mut points = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        let recall = tp as f64 / num_gts as f64;
        let precision = tp as f64 / (i + 1) as f64;
        points.push((recall, precision));
    }
    // Monotone envelope: precision at recall r is the max precision at any
    // recall >= r.
    let mut envelope = points.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    // Integrate over recall steps.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &envelope {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    PRCurve { points, ap }
}

/// mAP report over IoU thresholds with the 0.50 and 0.75 slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `(iou threshold, AP)` pairs.
    pub per_threshold: Vec<(f64, f64)>,
    /// `(class, AP at 0.50)` pairs for the classes evaluated.
    pub per_class_ap50: Vec<(usize, f64)>,
}

/// The COCO threshold grid 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.50 + 0.05 * i as f64).collect()
}

/// Mean AP over classes then thresholds for a set of scenes evaluated
/// jointly (detections pool per class across scenes, matching stays within
/// each scene).
pub fn mean_ap_scenes(
    scenes: &[(&[Detection], &[LabeledBox])],
    thresholds: &[f64],
) -> MapReport {
    // Class universe: anything present in gts or detections.
    let mut classes: Vec<usize> = scenes
        .iter()
        .flat_map(|(d, g)| {
            d.iter()
                .map(|x| x.class_id)
                .chain(g.iter().map(|x| x.class_id))
        })
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_threshold = Vec::with_capacity(thresholds.len());
    let mut per_class_ap50 = Vec::new();
    for &t in thresholds {
        let mut ap_sum = 0.0;
        for &class in &classes {
            let ap = class_ap(scenes, class, t);
            if t == 0.50 {
                per_class_ap50.push((class, ap));
            }
            ap_sum += ap;
        }
        let ap_mean = if classes.is_empty() {
            0.0
        } else {
            ap_sum / classes.len() as f64
        };
        per_threshold.push((t, ap_mean));
    }
    let map = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|&(_, a)| a).sum::<f64>() / per_threshold.len() as f64
    };
    let slice = |want: f64| {
        per_threshold
            .iter()
            .find(|&&(t, _)| (t - want).abs() < 1e-9)
            .map(|&(_, a)| a)
            .unwrap_or(0.0)
    };
    MapReport {
        map,
        ap50: slice(0.50),
        ap75: slice(0.75),
        per_threshold,
        per_class_ap50,
    }
}

/// Single-scene convenience wrapper around [`mean_ap_scenes`].
pub fn mean_ap(dets: &[Detection], gts: &[LabeledBox], thresholds: &[f64]) -> MapReport {
    mean_ap_scenes(&[(dets, gts)], thresholds)
}

fn class_ap(scenes: &[(&[Detection], &[LabeledBox])], class: usize, threshold: f64) -> f64 {
    // Match per scene, then pool (score, flag) pairs and rank globally.
    let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut num_gts = 0usize;
    for (si, (dets, gts)) in scenes.iter().enumerate() {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id == class).copied().collect();
        let cg: Vec<LabeledBox> = gts.iter().filter(|g| g.class_id == class).copied().collect();
        num_gts += cg.len();
        let flags = match_detections(&cd, &cg, threshold);
        // match_detections ranks internally; recover that order for pooling.
        let mut order: Vec<usize> = (0..cd.len()).collect();
        order.sort_by(|&a, &b| {
            cd[b].score
                .partial_cmp(&cd[a].score)
                .unwrap()
                .then(cd[a].anchor_index.cmp(&cd[b].anchor_index))
        });
        for (rank, &di) in order.iter().enumerate() {
            pooled.push((cd[di].score, si, cd[di].anchor_index, flags[rank]));
        }
    }
    pooled.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let flags: Vec<bool> = pooled.iter().map(|&(_, _, _, f)| f).collect();
    average_precision(&flags, num_gts).ap
}
