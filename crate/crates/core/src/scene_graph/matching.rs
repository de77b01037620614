use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `assignment[slot]` is the ground-truth index matched to that predicted
    /// slot, if any.
    pub assignment: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Matching {
    /// Inverse map: ground-truth index to predicted slot.
    pub fn gt_to_slot(&self, n_gt: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n_gt];
        for (s, a) in self.assignment.iter().enumerate() {
            if let Some(t) = a {
                out[*t] = s;
            }
        }
        out
    }
}

/// Minimum-cost assignment of every ground-truth column to a distinct
/// predicted row. `cost[p][t]` is the cost of matching slot `p` to object `t`.
///
/// Kuhn-Munkres with row/column potentials, `O(n_gt^2 * n_pred)`.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Matching> {
    let n_pred = cost.len();
    let n_gt = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != n_gt) {
        return Err(Error::Nn(crate::nn::NnError::Dimension("ragged cost matrix".into())));
    }
    if n_gt > n_pred {
        return Err(Error::Capacity {
            objects: n_gt,
            slots: n_pred,
        });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Nn(crate::nn::NnError::NonFinite("matching cost".into())));
    }
    // rows = ground truth (n), columns = slots (m), 1-based with sentinel 0
    let (n, m) = (n_gt, n_pred);
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
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
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; n_pred];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[j - 1] = Some(p[j] - 1);
        }
    }
    let mut by_gt = vec![0; n_gt];
    for (s, t) in assignment.iter().enumerate() {
        if let Some(t) = t {
            by_gt[*t] = s;
        }
    }
    let total_cost = by_gt.iter().enumerate().map(|(t, &s)| cost[s][t]).sum();
    Ok(Matching {
        assignment,
        total_cost,
    })
}
