//! Score thresholding, class-wise greedy NMS with a naive reference oracle,
//! and the NMS-free output path for one-to-one trained predictions.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou, BBox};
use crate::grid::{decode_indexed, AnchorPoint, RawPrediction};

/// A decoded detection; `score = obj_prob * cls_prob` of the best class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub anchor_index: usize,
}

/// Keep detections with `score > threshold`, order preserved.
pub fn score_filter(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score > threshold).copied().collect()
}

/// Score-descending order with ties broken by lower anchor index.
fn rank_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap()
        .then(a.anchor_index.cmp(&b.anchor_index))
}

/// Class-wise greedy NMS: per class, repeatedly keep the highest-scoring
/// remaining detection and drop the others overlapping it with
/// `IoU > iou_threshold`. Survivors are returned class by class (ascending
/// class id) in selection order.
pub fn nms_greedy(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept = Vec::new();
    for class in classes {
        let mut group: Vec<Detection> = dets
            .iter()
            .filter(|d| d.class_id == class)
            .copied()
            .collect();
        group.sort_by(rank_order);
        let mut suppressed = vec![false; group.len()];
        for i in 0..group.len() {
            if suppressed[i] {
                continue;
            }
            kept.push(group[i]);
            for j in (i + 1)..group.len() {
                if !suppressed[j] && iou(&group[i].bbox, &group[j].bbox) > iou_threshold {
                    suppressed[j] = true;
                }
            }
        }
    }
    kept
}

/// Literal O(n²) restatement of greedy NMS with no sorting shortcuts: scan
/// for the best unsuppressed detection, keep it, mark its overlaps, repeat.
/// Exists as the oracle [`nms_greedy`] is checked against.
pub fn nms_reference(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept_flags = vec![false; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for (i, d) in dets.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if rank_order(d, &dets[b]) == std::cmp::Ordering::Less => Some(i),
                Some(b) => Some(b),
            };
        }
        let Some(top) = best else { break };
        alive[top] = false;
        kept_flags[top] = true;
        kept.push(top);
        for (i, d) in dets.iter().enumerate() {
            if alive[i]
                && d.class_id == dets[top].class_id
                && iou(&d.bbox, &dets[top].bbox) > iou_threshold
            {
                alive[i] = false;
            }
        }
    }
    // Return class by class in selection order, matching nms_greedy.
    let mut out: Vec<Detection> = kept.iter().map(|&i| dets[i]).collect();
    out.sort_by(|a, b| a.class_id.cmp(&b.class_id).then(rank_order(a, b)));
    out
}

/// Decode every anchor, take the best class per anchor, and apply only the
/// score filter — no suppression. For predictions trained with one-to-one
/// assignment.
pub fn decode_nmsfree(
    preds: &[RawPrediction],
    anchors: &[AnchorPoint],
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let dets = decode_detections(preds, anchors)?;
    Ok(score_filter(&dets, score_threshold))
}

/// Decode all anchors into per-anchor best-class detections (no filtering).
pub fn decode_detections(
    preds: &[RawPrediction],
    anchors: &[AnchorPoint],
) -> Result<Vec<Detection>> {
    let mut out = Vec::with_capacity(preds.len());
    for (j, (p, a)) in preds.iter().zip(anchors).enumerate() {
        let dec = decode_indexed(p, a, j)?;
        let (class_id, cls_prob) = dec
            .cls_probs
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bc, bp), (c, &v)| {
                if v > bp {
                    (c, v)
                } else {
                    (bc, bp)
                }
            });
        out.push(Detection {
            bbox: dec.bbox,
            class_id,
            score: dec.obj_prob * cls_prob,
            anchor_index: j,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn det(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, score: f64, idx: usize) -> Detection {
        Detection {
            bbox: BBox::new(cx, cy, w, h),
            class_id,
            score,
            anchor_index: idx,
        }
    }

    #[test]
    fn score_filter_bounds() {
        let dets = vec![
            det(0.0, 0.0, 1.0, 1.0, 0, 0.3, 0),
            det(0.0, 0.0, 1.0, 1.0, 0, 0.7, 1),
        ];
        assert_eq!(score_filter(&dets, 0.0).len(), 2);
        assert_eq!(score_filter(&dets, 1.0).len(), 0);
        let half = score_filter(&dets, 0.5);
        assert_eq!(half.len(), 1);
        assert_eq!(half[0].anchor_index, 1);
    }

    #[test]
    fn nms_keeps_best_of_identical_pair() {
        let dets = vec![
            det(5.0, 5.0, 4.0, 4.0, 0, 0.9, 0),
            det(5.0, 5.0, 4.0, 4.0, 0, 0.8, 1),
        ];
        let kept = nms_greedy(&dets, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_disjoint_all_survive() {
        let dets = vec![
            det(5.0, 5.0, 4.0, 4.0, 0, 0.9, 0),
            det(50.0, 5.0, 4.0, 4.0, 0, 0.8, 1),
            det(5.0, 50.0, 4.0, 4.0, 1, 0.7, 2),
        ];
        assert_eq!(nms_greedy(&dets, 0.5).len(), 3);
    }

    fn random_dets(rng: &mut SplitMix64, n: usize, classes: usize) -> Vec<Detection> {
        (0..n)
            .map(|i| {
                det(
                    rng.uniform(0.0, 100.0),
                    rng.uniform(0.0, 100.0),
                    rng.uniform(2.0, 30.0),
                    rng.uniform(2.0, 30.0),
                    rng.below(classes as u64) as usize,
                    rng.next_f64(),
                    i,
                )
            })
            .collect()
    }

    fn as_set(dets: &[Detection]) -> std::collections::BTreeSet<usize> {
        dets.iter().map(|d| d.anchor_index).collect()
    }

    #[test]
    fn greedy_matches_reference_on_random_instances() {
        let mut rng = SplitMix64::new(123);
        for _ in 0..20 {
            let dets = random_dets(&mut rng, 1000, 4);
            let a = nms_greedy(&dets, 0.5);
            let b = nms_reference(&dets, 0.5);
            assert_eq!(as_set(&a), as_set(&b));
            assert_eq!(a.len(), b.len());
        }
        assert!(nms_reference(&[], 0.5).is_empty());
        let one = vec![det(0.0, 0.0, 1.0, 1.0, 0, 0.5, 7)];
        assert_eq!(nms_reference(&one, 0.5), one);
    }

    #[test]
    fn nms_permutation_invariant_and_subset() {
        let mut rng = SplitMix64::new(7);
        let dets = random_dets(&mut rng, 200, 3);
        let base = as_set(&nms_greedy(&dets, 0.4));
        let mut shuffled = dets.clone();
        for i in (1..shuffled.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            shuffled.swap(i, j);
        }
        assert_eq!(as_set(&nms_greedy(&shuffled, 0.4)), base);
        // Subset of input, scores untouched.
        for d in nms_greedy(&dets, 0.4) {
            assert_eq!(dets[d.anchor_index], d);
        }
    }

    #[test]
    fn kept_set_is_iou_independent() {
        let mut rng = SplitMix64::new(8);
        let dets = random_dets(&mut rng, 300, 2);
        let kept = nms_greedy(&dets, 0.5);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class_id == b.class_id {
                    assert!(iou(&a.bbox, &b.bbox) <= 0.5);
                }
            }
        }
    }
}
