//! Shortest-augmenting-path Hungarian solver for rectangular cost matrices.

use crate::error::{Error, Result};

/// Optimal one-to-one pairing of proposals to ground-truth instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(proposal, gt)` pairs, one per ground truth, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    /// Cost of each pair, aligned with `pairs`.
    pub pair_costs: Vec<f64>,
    /// Proposals without a ground truth, ascending.
    pub unassigned: Vec<usize>,
}

impl Assignment {
    pub fn empty(num_proposals: usize) -> Self {
        Self {
            pairs: Vec::new(),
            pair_costs: Vec::new(),
            unassigned: (0..num_proposals).collect(),
        }
    }

    /// Sum of pair costs, accumulated in gt order.
    pub fn total_cost(&self) -> f64 {
        self.pair_costs.iter().sum()
    }

    /// Ground truth assigned to each proposal, if any.
    pub fn gt_of_proposal(&self, num_proposals: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_proposals];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

/// Minimizes total cost over injective matchings that cover every column.
///
/// `costs` is row-major `[proposals × gts]` and requires
/// `proposals >= gts`. Columns play the role of rows in the classical
/// formulation, so the rectangular case needs no padding. Among equal-cost
/// alternatives the scan order favors lower proposal indices.
pub fn hungarian_assign(costs: &[f64], proposals: usize, gts: usize) -> Result<Assignment> {
    if costs.len() != proposals * gts {
        return Err(Error::Dimension(format!(
            "cost buffer of {} entries for [{proposals} × {gts}]",
            costs.len()
        )));
    }
    if gts > proposals {
        return Err(Error::Contract(format!(
            "{gts} ground-truth instances exceed {proposals} proposals"
        )));
    }
    if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
        return Err(Error::Contract(format!("cost entry {i} is not finite")));
    }
    if gts == 0 {
        return Ok(Assignment::empty(proposals));
    }

    let (n, m) = (gts, proposals);
    let cost = |gt: usize, prop: usize| costs[prop * gts + gt];
    // 1-based potentials; index 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut min_reduced = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for col in 1..=m {
                if used[col] {
                    continue;
                }
                let reduced = cost(r0 - 1, col - 1) - u[r0] - v[col];
                if reduced < min_reduced[col] {
                    min_reduced[col] = reduced;
                    way[col] = col0;
                }
                if min_reduced[col] < delta {
                    delta = min_reduced[col];
                    col1 = col;
                }
            }
            for col in 0..=m {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_reduced[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut prop_of_gt = vec![usize::MAX; n];
    for col in 1..=m {
        if owner[col] > 0 {
            prop_of_gt[owner[col] - 1] = col - 1;
        }
    }
    let pairs: Vec<(usize, usize)> = prop_of_gt.iter().enumerate().map(|(g, &p)| (p, g)).collect();
    let pair_costs = pairs.iter().map(|&(p, g)| cost(g, p)).collect();
    let mut taken = vec![false; m];
    for &(p, _) in &pairs {
        taken[p] = true;
    }
    let unassigned = (0..m).filter(|p| !taken[*p]).collect();
    Ok(Assignment {
        pairs,
        pair_costs,
        unassigned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton() {
        let a = hungarian_assign(&[0.0], 1, 1).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
    }

    #[test]
    fn two_by_two_diagonal() {
        let a = hungarian_assign(&[1.0, 2.0, 2.0, 1.0], 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(), 2.0);
    }

    #[test]
    fn three_by_two_leaves_proposal_two() {
        let a = hungarian_assign(&[0.0, 9.0, 9.0, 0.0, 5.0, 5.0], 3, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.unassigned, vec![2]);
    }

    #[test]
    fn ties_prefer_low_proposals() {
        let a = hungarian_assign(&[0.0; 8], 4, 2).unwrap();
        let mut props: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        props.sort();
        assert_eq!(props, vec![0, 1]);
    }

    #[test]
    fn empty_gt_and_errors() {
        let a = hungarian_assign(&[], 3, 0).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unassigned, vec![0, 1, 2]);
        assert!(matches!(hungarian_assign(&[0.0; 2], 1, 2), Err(Error::Contract(_))));
        assert!(hungarian_assign(&[f64::NAN], 1, 1).is_err());
    }
}
