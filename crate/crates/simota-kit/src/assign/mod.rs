//! Label-assignment strategies: single-center baseline, center 3x3
//! multi-positives, SimOTA (pairwise cost + center prior + dynamic top-k),
//! a Sinkhorn-Knopp optimal-transport reference, and Hungarian one-to-one
//! matching.
//!
//! The pairwise cost between ground truth `i` and prediction `j` is
//!
//! ```text
//! c_ij = L_cls_ij + lambda * L_reg_ij + offcenter_penalty * (1 - center_mask_ij)
//! ```
//!
//! with `L_cls` the BCE between the joint score `sqrt(cls_prob * obj_prob)`
//! and the ground-truth one-hot, and `L_reg = -ln(iou + 1e-8)`.

mod hungarian;
mod sinkhorn;

pub use hungarian::one_to_one_assign;
pub use sinkhorn::{plan_to_assignment, sinkhorn_ot, TransportPlan};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, LabeledBox};
use crate::grid::{assign_fpn_level, AnchorPoint, DecodedPrediction, FpnSpec};
use crate::losses::bce;

/// Floor added to IoU before the log in the regression cost.
pub const REG_COST_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// The cell containing the gt center plus its 8 grid neighbors, per
    /// level.
    Cell3x3,
    /// Anchors whose cell center lies within `center_radius * stride` of the
    /// gt center (Euclidean, strict).
    Radius,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignerConfig {
    /// Balancing coefficient on the regression cost.
    pub lambda: f64,
    pub center_mode: CenterMode,
    /// Radius in strides for [`CenterMode::Radius`].
    pub center_radius: f64,
    /// Number of top candidate IoUs summed by the dynamic-k estimate.
    pub q: usize,
    /// Soft penalty added to costs outside the center region.
    pub offcenter_penalty: f64,
    /// Hard cap on the per-gt positive count.
    pub k_cap: usize,
}

impl Default for AssignerConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            center_mode: CenterMode::Radius,
            center_radius: 2.5,
            q: 10,
            offcenter_penalty: 1e5,
            k_cap: 10,
        }
    }
}

impl AssignerConfig {
    /// The multi-positives stage: 3x3 center sampling.
    pub fn cell3x3() -> Self {
        Self {
            center_mode: CenterMode::Cell3x3,
            ..Self::default()
        }
    }
}

/// Boolean candidate mask over anchors for one ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterCandidates {
    pub mask: Vec<bool>,
    /// Set when the gt center falls outside the image; the mask is empty in
    /// that case.
    pub center_outside: bool,
}

/// Candidate anchors near the gt center, per [`CenterMode`].
pub fn center_candidates(
    gt: &LabeledBox,
    anchors: &[AnchorPoint],
    cfg: &AssignerConfig,
) -> CenterCandidates {
    let (cx, cy) = (gt.bbox.cx, gt.bbox.cy);
    // Canvas extent implied by the anchor grid.
    let mut width = 0.0f64;
    let mut height = 0.0f64;
    for a in anchors {
        width = width.max(((a.gx + 1) * a.stride) as f64);
        height = height.max(((a.gy + 1) * a.stride) as f64);
    }
    if cx < 0.0 || cy < 0.0 || cx > width || cy > height {
        return CenterCandidates {
            mask: vec![false; anchors.len()],
            center_outside: true,
        };
    }
    let mask = anchors
        .iter()
        .map(|a| {
            let s = a.stride as f64;
            match cfg.center_mode {
                CenterMode::Cell3x3 => {
                    let gx_c = (cx / s).floor() as i64;
                    let gy_c = (cy / s).floor() as i64;
                    (a.gx as i64 - gx_c).abs() <= 1 && (a.gy as i64 - gy_c).abs() <= 1
                }
                CenterMode::Radius => {
                    let (ax, ay) = a.cell_center();
                    let r = cfg.center_radius * s;
                    (ax - cx).hypot(ay - cy) < r
                }
            }
        })
        .collect();
    CenterCandidates {
        mask,
        center_outside: false,
    }
}

/// Pairwise assignment costs between every gt and every prediction.
///
/// Row-major `num_gts x num_anchors` storage. Invariant:
/// `costs == cls_costs + lambda*reg_costs + offcenter_penalty*(1 - center_mask)`
/// elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub num_gts: usize,
    pub num_anchors: usize,
    pub costs: Vec<f64>,
    pub cls_costs: Vec<f64>,
    pub reg_costs: Vec<f64>,
    pub center_mask: Vec<bool>,
    pub ious: Vec<f64>,
    /// Per-gt flag from [`center_candidates`].
    pub center_outside: Vec<bool>,
}

impl CostMatrix {
    #[inline]
    pub fn idx(&self, gt: usize, anchor: usize) -> usize {
        gt * self.num_anchors + anchor
    }

    pub fn cost(&self, gt: usize, anchor: usize) -> f64 {
        self.costs[self.idx(gt, anchor)]
    }

    pub fn iou_at(&self, gt: usize, anchor: usize) -> f64 {
        self.ious[self.idx(gt, anchor)]
    }

    pub fn in_center(&self, gt: usize, anchor: usize) -> bool {
        self.center_mask[self.idx(gt, anchor)]
    }

    /// Candidate count of one gt row.
    pub fn candidate_count(&self, gt: usize) -> usize {
        let row = &self.center_mask[gt * self.num_anchors..(gt + 1) * self.num_anchors];
        row.iter().filter(|&&m| m).count()
    }
}

/// Build the cost matrix for decoded predictions against ground truths.
///
/// `preds` and `anchors` are aligned by index. Empty `gts` yields a `0 x A`
/// matrix. Rows are filled in parallel; every cell is a pure function of its
/// pair, so the result is independent of the worker count.
pub fn cost_matrix(
    preds: &[DecodedPrediction],
    anchors: &[AnchorPoint],
    gts: &[LabeledBox],
    cfg: &AssignerConfig,
) -> Result<CostMatrix> {
    if preds.len() != anchors.len() {
        return Err(Error::invalid("preds/anchors length mismatch"));
    }
    for (j, p) in preds.iter().enumerate() {
        let finite = p.bbox.is_valid()
            && p.obj_prob.is_finite()
            && p.cls_probs.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!(
                "non-finite prediction at anchor {j}"
            )));
        }
    }
    let num_gts = gts.len();
    let num_anchors = preds.len();
    let mut cls_costs = vec![0.0; num_gts * num_anchors];
    let mut reg_costs = vec![0.0; num_gts * num_anchors];
    let mut costs = vec![0.0; num_gts * num_anchors];
    let mut center_mask = vec![false; num_gts * num_anchors];
    let mut ious = vec![0.0; num_gts * num_anchors];
    let mut center_outside = vec![false; num_gts];

    let rows: Vec<_> = costs
        .chunks_mut(num_anchors.max(1))
        .zip(cls_costs.chunks_mut(num_anchors.max(1)))
        .zip(reg_costs.chunks_mut(num_anchors.max(1)))
        .zip(center_mask.chunks_mut(num_anchors.max(1)))
        .zip(ious.chunks_mut(num_anchors.max(1)))
        .zip(center_outside.iter_mut())
        .zip(gts.iter())
        .collect();

    rows.into_par_iter().for_each(
        |((((((cost_row, cls_row), reg_row), mask_row), iou_row), outside), gt)| {
            let cand = center_candidates(gt, anchors, cfg);
            *outside = cand.center_outside;
            mask_row.copy_from_slice(&cand.mask);
            for j in 0..num_anchors {
                let pair = pair_cost(&preds[j], gt, cand.mask[j], cfg);
                cls_row[j] = pair.cls;
                reg_row[j] = pair.reg;
                iou_row[j] = pair.iou;
                cost_row[j] = pair.total;
            }
        },
    );

    Ok(CostMatrix {
        num_gts,
        num_anchors,
        costs,
        cls_costs,
        reg_costs,
        center_mask,
        ious,
        center_outside,
    })
}

struct PairCost {
    cls: f64,
    reg: f64,
    iou: f64,
    total: f64,
}

/// Scalar cost of one (prediction, gt) pair; also the elementwise oracle the
/// tests recompute against.
fn pair_cost(pred: &DecodedPrediction, gt: &LabeledBox, in_center: bool, cfg: &AssignerConfig) -> PairCost {
    let mut cls = 0.0;
    for (c, &p_c) in pred.cls_probs.iter().enumerate() {
        let joint = (p_c * pred.obj_prob).sqrt();
        let y = if c == gt.class_id { 1.0 } else { 0.0 };
        cls += bce(joint, y).0;
    }
    let ov = iou(&pred.bbox, &gt.bbox);
    let reg = -(ov + REG_COST_EPS).ln();
    let penalty = if in_center { 0.0 } else { cfg.offcenter_penalty };
    let total = cls + cfg.lambda * reg + penalty;
    PairCost {
        cls,
        reg,
        iou: ov,
        total,
    }
}

/// Per-gt dynamic positive count: `clamp(round(sum of top-q candidate IoUs),
/// 1, min(k_cap, candidate count))`, with a floor of one even for gts whose
/// candidate set is empty. Rounding is half-up.
pub fn dynamic_k(
    ious: &[f64],
    candidate_mask: &[bool],
    num_gts: usize,
    num_anchors: usize,
    cfg: &AssignerConfig,
) -> Vec<usize> {
    assert_eq!(ious.len(), num_gts * num_anchors);
    assert_eq!(candidate_mask.len(), num_gts * num_anchors);
    (0..num_gts)
        .map(|i| {
            let row = i * num_anchors;
            let mut cand: Vec<f64> = (0..num_anchors)
                .filter(|&j| candidate_mask[row + j])
                .map(|j| ious[row + j])
                .collect();
            cand.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let top_q: f64 = cand.iter().take(cfg.q).sum();
            let cap = cfg.k_cap.min(cand.len()).max(1);
            (top_q.round() as usize).clamp(1, cap)
        })
        .collect()
}

/// Anchor-to-gt labeling produced by any of the assignment strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `Some(gt index)` for positives, `None` for background.
    pub anchor_labels: Vec<Option<usize>>,
    /// Anchor indices per gt, ascending.
    pub per_gt_positives: Vec<Vec<usize>>,
    /// Per-gt k (target positive count of the producing strategy).
    pub k_values: Vec<usize>,
}

impl Assignment {
    pub fn num_fg(&self) -> usize {
        self.anchor_labels.iter().filter(|l| l.is_some()).count()
    }

    /// Check structural consistency between the label vector and the per-gt
    /// lists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![0usize; self.per_gt_positives.len()];
        for (j, label) in self.anchor_labels.iter().enumerate() {
            if let Some(g) = *label {
                if g >= self.per_gt_positives.len() {
                    return Err(Error::invalid(format!("anchor {j} labels missing gt {g}")));
                }
                if !self.per_gt_positives[g].contains(&j) {
                    return Err(Error::invalid(format!(
                        "anchor {j} not listed for gt {g}"
                    )));
                }
                seen[g] += 1;
            }
        }
        for (g, list) in self.per_gt_positives.iter().enumerate() {
            if list.len() != seen[g] {
                return Err(Error::invalid(format!("gt {g} positive list inconsistent")));
            }
        }
        Ok(())
    }
}

/// An anchor wanted by several gts and the resolution taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConflict {
    pub anchor: usize,
    pub winner: usize,
    pub losers: Vec<usize>,
}

/// Structured diagnostics of a SimOTA run, serializable by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimotaDiagnostics {
    pub k_values: Vec<usize>,
    pub candidate_counts: Vec<usize>,
    /// Per-gt top-k selections before conflict resolution.
    pub pre_conflict: Vec<Vec<usize>>,
    pub conflicts: Vec<AnchorConflict>,
    /// Gts whose candidate set was empty (zero positives, not a failure).
    pub gts_without_candidates: Vec<usize>,
}

/// SimOTA: per gt, the `k_i` least-cost anchors among its center candidates
/// become positives; an anchor claimed by several gts goes to the gt with
/// the smallest pairwise cost (ties to the lower gt index), and the loser's
/// forfeited slot is not re-allocated.
pub fn simota_assign(cm: &CostMatrix, cfg: &AssignerConfig) -> (Assignment, SimotaDiagnostics) {
    let ks = dynamic_k(&cm.ious, &cm.center_mask, cm.num_gts, cm.num_anchors, cfg);
    let mut pre_conflict: Vec<Vec<usize>> = Vec::with_capacity(cm.num_gts);
    let mut candidate_counts = Vec::with_capacity(cm.num_gts);
    let mut without = Vec::new();
    for i in 0..cm.num_gts {
        let mut cand: Vec<usize> = (0..cm.num_anchors).filter(|&j| cm.in_center(i, j)).collect();
        candidate_counts.push(cand.len());
        if cand.is_empty() {
            without.push(i);
            pre_conflict.push(Vec::new());
            continue;
        }
        cand.sort_by(|&a, &b| {
            cm.cost(i, a)
                .partial_cmp(&cm.cost(i, b))
                .unwrap()
                .then(a.cmp(&b))
        });
        cand.truncate(ks[i]);
        cand.sort_unstable();
        pre_conflict.push(cand);
    }

    // Conflict resolution: min-cost gt wins each contested anchor.
    let mut anchor_labels: Vec<Option<usize>> = vec![None; cm.num_anchors];
    let mut conflicts = Vec::new();
    let mut claims: Vec<Vec<usize>> = vec![Vec::new(); cm.num_anchors];
    for (i, sel) in pre_conflict.iter().enumerate() {
        for &j in sel {
            claims[j].push(i);
        }
    }
    for (j, claimants) in claims.iter().enumerate() {
        match claimants.len() {
            0 => {}
            1 => anchor_labels[j] = Some(claimants[0]),
            _ => {
                let winner = *claimants
                    .iter()
                    .min_by(|&&a, &&b| {
                        cm.cost(a, j)
                            .partial_cmp(&cm.cost(b, j))
                            .unwrap()
                            .then(a.cmp(&b))
                    })
                    .unwrap();
                anchor_labels[j] = Some(winner);
                conflicts.push(AnchorConflict {
                    anchor: j,
                    winner,
                    losers: claimants.iter().copied().filter(|&g| g != winner).collect(),
                });
            }
        }
    }

    let mut per_gt_positives: Vec<Vec<usize>> = vec![Vec::new(); cm.num_gts];
    for (j, label) in anchor_labels.iter().enumerate() {
        if let Some(g) = *label {
            per_gt_positives[g].push(j);
        }
    }

    (
        Assignment {
            anchor_labels,
            per_gt_positives,
            k_values: ks.clone(),
        },
        SimotaDiagnostics {
            k_values: ks,
            candidate_counts,
            pre_conflict,
            conflicts,
            gts_without_candidates: without,
        },
    )
}

/// Sinkhorn solver defaults (log-domain updates keep the large offcenter
/// penalties finite).
pub const SINKHORN_EPS: f64 = 0.1;
pub const SINKHORN_TOL: f64 = 1e-6;
pub const SINKHORN_MAX_ITERS: usize = 10_000;

/// Agreement between SimOTA and the exact-OT route on one cost matrix.
/// Wall times are measured but reported separately by the CLI (stdout), so
/// report files stay byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtComparison {
    /// Fraction of anchors labeled identically by both routes.
    pub agreement_rate: f64,
    pub k_values: Vec<usize>,
    pub sinkhorn_violation: f64,
    pub sinkhorn_converged: bool,
    pub sinkhorn_iterations: usize,
    pub simota_num_fg: usize,
    pub ot_num_fg: usize,
}

/// Run SimOTA and Sinkhorn-OT→argmax on the same cost matrix and measure
/// per-anchor agreement. Returns the comparison plus the two wall times
/// (SimOTA, Sinkhorn) in microseconds.
pub fn ot_compare(cm: &CostMatrix, cfg: &AssignerConfig) -> Result<(OtComparison, u64, u64)> {
    let t0 = std::time::Instant::now();
    let (simota, diag) = simota_assign(cm, cfg);
    let simota_us = t0.elapsed().as_micros() as u64;

    let t1 = std::time::Instant::now();
    let plan = sinkhorn_ot(cm, &diag.k_values, SINKHORN_EPS, SINKHORN_MAX_ITERS, SINKHORN_TOL)?;
    let ot = plan_to_assignment(&plan);
    let sinkhorn_us = t1.elapsed().as_micros() as u64;

    let agree = simota
        .anchor_labels
        .iter()
        .zip(&ot.anchor_labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok((
        OtComparison {
            agreement_rate: agree as f64 / cm.num_anchors.max(1) as f64,
            k_values: diag.k_values,
            sinkhorn_violation: plan.violation,
            sinkhorn_converged: plan.converged,
            sinkhorn_iterations: plan.iterations,
            simota_num_fg: simota.num_fg(),
            ot_num_fg: ot.num_fg(),
        },
        simota_us,
        sinkhorn_us,
    ))
}

/// A gt that lost its single center anchor to an earlier gt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleCenterCollision {
    pub anchor: usize,
    pub winner: usize,
    pub loser: usize,
}

/// Baseline assignment: per gt, exactly the one anchor whose cell contains
/// the gt center, on the level designated by its scale range. When two gts
/// land on the same anchor the later gt (by list order) loses.
pub fn single_center_assign(
    gts: &[LabeledBox],
    anchors: &[AnchorPoint],
    spec: &FpnSpec,
) -> (Assignment, Vec<SingleCenterCollision>) {
    assert_eq!(anchors.len(), spec.anchor_count(), "anchors must match spec");
    let mut anchor_labels: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut per_gt_positives: Vec<Vec<usize>> = vec![Vec::new(); gts.len()];
    let mut collisions = Vec::new();
    for (i, gt) in gts.iter().enumerate() {
        let level = assign_fpn_level(gt, spec);
        let s = spec.strides[level] as f64;
        let (gh, gw) = spec.grid_dims(level);
        // Floor rule; boundary centers go to the cell whose left-top corner
        // they sit on. Clamped into the grid for centers at the far edges.
        let gx = ((gt.bbox.cx / s).floor() as i64).clamp(0, gw as i64 - 1) as usize;
        let gy = ((gt.bbox.cy / s).floor() as i64).clamp(0, gh as i64 - 1) as usize;
        let j = spec.level_offset(level) + gy * gw + gx;
        match anchor_labels[j] {
            Some(winner) => collisions.push(SingleCenterCollision {
                anchor: j,
                winner,
                loser: i,
            }),
            None => {
                anchor_labels[j] = Some(i);
                per_gt_positives[i].push(j);
            }
        }
    }
    (
        Assignment {
            anchor_labels,
            per_gt_positives,
            k_values: vec![1; gts.len()],
        },
        collisions,
    )
}

/// Multi-positives assignment: the center 3x3 cells on the gt's designated
/// FPN level all become positives; contested anchors go to the earlier gt.
pub fn multi3x3_assign(
    gts: &[LabeledBox],
    anchors: &[AnchorPoint],
    spec: &FpnSpec,
) -> (Assignment, Vec<SingleCenterCollision>) {
    assert_eq!(anchors.len(), spec.anchor_count(), "anchors must match spec");
    let cfg = AssignerConfig::cell3x3();
    let mut anchor_labels: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut per_gt_positives: Vec<Vec<usize>> = vec![Vec::new(); gts.len()];
    let mut collisions = Vec::new();
    for (i, gt) in gts.iter().enumerate() {
        let level = assign_fpn_level(gt, spec);
        let cand = center_candidates(gt, anchors, &cfg);
        for (j, &m) in cand.mask.iter().enumerate() {
            if !m || anchors[j].level != level {
                continue;
            }
            match anchor_labels[j] {
                Some(winner) => collisions.push(SingleCenterCollision {
                    anchor: j,
                    winner,
                    loser: i,
                }),
                None => {
                    anchor_labels[j] = Some(i);
                    per_gt_positives[i].push(j);
                }
            }
        }
    }
    let k_values = per_gt_positives
        .iter()
        .map(|p| p.len().max(1))
        .collect();
    (
        Assignment {
            anchor_labels,
            per_gt_positives,
            k_values,
        },
        collisions,
    )
}
