//! Minimum-cost one-to-one matching for the end-to-end (NMS-free) path.

use crate::assign::{Assignment, CostMatrix};
use crate::error::{Error, Result};

/// Match every gt to a distinct anchor so the total pairwise cost is
/// minimal (Hungarian algorithm with potentials, O(G²·A)). All `k` values
/// are 1. Fails when there are more gts than anchors.
pub fn one_to_one_assign(cm: &CostMatrix) -> Result<Assignment> {
    if cm.num_gts > cm.num_anchors {
        return Err(Error::Infeasible {
            num_gts: cm.num_gts,
            num_anchors: cm.num_anchors,
        });
    }
    let row_to_col = hungarian_min_cost(&cm.costs, cm.num_gts, cm.num_anchors);
    let mut anchor_labels = vec![None; cm.num_anchors];
    let mut per_gt_positives: Vec<Vec<usize>> = vec![Vec::new(); cm.num_gts];
    for (gt, &anchor) in row_to_col.iter().enumerate() {
        anchor_labels[anchor] = Some(gt);
        per_gt_positives[gt].push(anchor);
    }
    Ok(Assignment {
        anchor_labels,
        per_gt_positives,
        k_values: vec![1; cm.num_gts],
    })
}

/// Shortest-augmenting-path Hungarian algorithm on a rectangular cost
/// matrix (`rows <= cols`). Returns the matched column per row.
pub(crate) fn hungarian_min_cost(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols);
    assert_eq!(cost.len(), rows * cols);
    if rows == 0 {
        return Vec::new();
    }
    // 1-indexed potentials; p[j] is the row matched to column j, 0 if free.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Walk the augmenting path back.
        while j0 != 0 {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }
    let mut row_to_col = vec![usize::MAX; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(row_to_col.iter().all(|&c| c != usize::MAX));
    row_to_col
}
