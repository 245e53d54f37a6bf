//! Entropic-regularized optimal transport via log-domain Sinkhorn-Knopp.
//!
//! The transport problem mirrors the OT view of label assignment: each gt
//! supplies `k_i` units of positive label, a background supplier provides
//! the remaining `A - sum(k)` units, and every anchor demands exactly one
//! unit. The background row has constant cost, which leaves the argmin plan
//! unchanged whatever that constant is; zero is used.

use serde::{Deserialize, Serialize};

use crate::assign::{Assignment, CostMatrix};
use crate::error::{Error, Result};

/// Entropic OT plan between `num_gts + 1` suppliers (last row = background)
/// and `num_anchors` anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub num_gts: usize,
    pub num_anchors: usize,
    /// `(num_gts + 1) x num_anchors`, row-major, nonnegative.
    pub plan: Vec<f64>,
    /// Row masses: `k_i` per gt, then the background mass.
    pub supply: Vec<f64>,
    /// Column masses, all 1.
    pub demand: Vec<f64>,
    pub converged: bool,
    /// Final infinity-norm marginal violation.
    pub violation: f64,
    pub iterations: usize,
    /// Violation after every iteration, non-increasing.
    pub violation_history: Vec<f64>,
}

impl TransportPlan {
    #[inline]
    pub fn at(&self, row: usize, anchor: usize) -> f64 {
        self.plan[row * self.num_anchors + anchor]
    }

    pub fn background_row(&self) -> usize {
        self.num_gts
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = terms.collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = vals.iter().map(|v| (v - m).exp()).sum();
    m + sum.ln()
}

/// Solve the entropic OT problem for a cost matrix and per-gt supplies.
///
/// Stops when the infinity-norm marginal violation drops below `tol` or at
/// `max_iters`; non-convergence is reported through the `converged` flag,
/// not an error. Fails when `sum(k) > num_anchors` (negative background
/// supply).
pub fn sinkhorn_ot(
    cm: &CostMatrix,
    k_values: &[usize],
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    if k_values.len() != cm.num_gts {
        return Err(Error::invalid("one k per gt required"));
    }
    if eps <= 0.0 || tol <= 0.0 || max_iters == 0 {
        return Err(Error::invalid("eps, tol and max_iters must be positive"));
    }
    let num_anchors = cm.num_anchors;
    if num_anchors == 0 {
        return Err(Error::invalid("no anchors to transport to"));
    }
    let total_k: usize = k_values.iter().sum();
    if total_k > num_anchors {
        return Err(Error::invalid(format!(
            "supply {total_k} exceeds demand {num_anchors}"
        )));
    }
    let rows = cm.num_gts + 1;
    let mut cost = vec![0.0; rows * num_anchors];
    cost[..cm.num_gts * num_anchors].copy_from_slice(&cm.costs);

    let mut supply: Vec<f64> = k_values.iter().map(|&k| k as f64).collect();
    supply.push((num_anchors - total_k) as f64);
    let demand = vec![1.0; num_anchors];
    let ln_supply: Vec<f64> = supply
        .iter()
        .map(|&s| if s > 0.0 { s.ln() } else { f64::NEG_INFINITY })
        .collect();

    let mut f = vec![0.0; rows];
    let mut g = vec![0.0; num_anchors];
    let mut plan = vec![0.0; rows * num_anchors];
    let mut history = Vec::new();
    let mut converged = false;
    let mut violation = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        for i in 0..rows {
            if supply[i] == 0.0 {
                f[i] = f64::NEG_INFINITY;
                continue;
            }
            let lse = log_sum_exp((0..num_anchors).map(|j| (g[j] - cost[i * num_anchors + j]) / eps));
            f[i] = eps * ln_supply[i] - eps * lse;
        }
        for (j, g_j) in g.iter_mut().enumerate() {
            let lse = log_sum_exp((0..rows).map(|i| {
                if f[i] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    (f[i] - cost[i * num_anchors + j]) / eps
                }
            }));
            // ln(demand) = 0.
            *g_j = -eps * lse;
        }
        for i in 0..rows {
            for j in 0..num_anchors {
                plan[i * num_anchors + j] = if f[i] == f64::NEG_INFINITY {
                    0.0
                } else {
                    ((f[i] + g[j] - cost[i * num_anchors + j]) / eps).exp()
                };
            }
        }
        violation = marginal_violation(&plan, &supply, &demand, rows, num_anchors);
        history.push(violation);
        if violation < tol {
            converged = true;
            break;
        }
    }

    Ok(TransportPlan {
        num_gts: cm.num_gts,
        num_anchors,
        plan,
        supply,
        demand,
        converged,
        violation,
        iterations,
        violation_history: history,
    })
}

fn marginal_violation(
    plan: &[f64],
    supply: &[f64],
    demand: &[f64],
    rows: usize,
    cols: usize,
) -> f64 {
    let mut worst = 0.0f64;
    for (i, &s) in supply.iter().enumerate().take(rows) {
        let sum: f64 = plan[i * cols..(i + 1) * cols].iter().sum();
        worst = worst.max((sum - s).abs());
    }
    for (j, &d) in demand.iter().enumerate().take(cols) {
        let sum: f64 = (0..rows).map(|i| plan[i * cols + j]).sum();
        worst = worst.max((sum - d).abs());
    }
    worst
}

/// Decode a transport plan to a hard assignment: each anchor goes to the row
/// holding its largest plan mass, ties to the lower row index; the
/// background row means no gt.
pub fn plan_to_assignment(plan: &TransportPlan) -> Assignment {
    let rows = plan.num_gts + 1;
    let mut anchor_labels = vec![None; plan.num_anchors];
    let mut per_gt_positives: Vec<Vec<usize>> = vec![Vec::new(); plan.num_gts];
    for j in 0..plan.num_anchors {
        let mut best_row = 0;
        let mut best = plan.at(0, j);
        for i in 1..rows {
            let v = plan.at(i, j);
            if v > best {
                best = v;
                best_row = i;
            }
        }
        if best_row < plan.num_gts {
            anchor_labels[j] = Some(best_row);
            per_gt_positives[best_row].push(j);
        }
    }
    let k_values = plan.supply[..plan.num_gts]
        .iter()
        .map(|&s| s.round() as usize)
        .collect();
    Assignment {
        anchor_labels,
        per_gt_positives,
        k_values,
    }
}
