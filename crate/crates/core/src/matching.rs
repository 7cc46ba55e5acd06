//! Bipartite matching between supervision labels and predictions, and top-k
//! pseudo-label selection from the unmatched remainder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::giou;
use crate::model::Prediction;
use crate::supervision::{LabelCategory, SupervisionLabel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchingError {
    #[error("cost matrix has {rows} rows but only {cols} columns")]
    TooManyRows { rows: usize, cols: usize },
    #[error("non-finite cost at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("cost data length {len} does not match {rows}x{cols}")]
    Shape { rows: usize, cols: usize, len: usize },
}

/// Weights of the regression part of the match cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchWeights {
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights { l1: 5.0, giou: 2.0 }
    }
}

/// Rows are supervision labels, columns are predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatchingError> {
        if data.len() != rows * cols {
            return Err(MatchingError::Shape { rows, cols, len: data.len() });
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatchingError::NonFinite { row: k / cols, col: k % cols });
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchingError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    /// Pairwise costs between every label and every prediction.
    pub fn build(labels: &[SupervisionLabel], preds: &[Prediction], weights: MatchWeights) -> Result<Self, MatchingError> {
        let mut data = Vec::with_capacity(labels.len() * preds.len());
        for label in labels {
            for pred in preds {
                data.push(match_cost(label, pred, weights));
            }
        }
        Self::new(labels.len(), preds.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// Result of matching labels to predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction_index, supervision_index)`, ordered by supervision index.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions without a label, ascending.
    pub unmatched_predictions: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty(num_predictions: usize) -> Self {
        Assignment {
            pairs: Vec::new(),
            unmatched_predictions: (0..num_predictions).collect(),
            total_cost: 0.0,
        }
    }
}

/// `L_r(b_hat, b) - cls(c_hat) - S_hat`, where `L_r` is the weighted L1 plus
/// GIoU loss and `cls(c_hat)` is the predicted probability of the label's
/// channel (the unknown channel for unknown labels).
pub fn match_cost(label: &SupervisionLabel, pred: &Prediction, weights: MatchWeights) -> f64 {
    let channel = match label.category {
        LabelCategory::Known(c) => c,
        LabelCategory::Unknown => pred.cls.len() - 1,
    };
    let l_r = weights.l1 * label.bbox.l1(&pred.bbox) + weights.giou * (1.0 - giou(&label.bbox, &pred.bbox));
    l_r - pred.cls[channel] - label.confidence
}

/// Minimum-cost row-complete assignment for `rows <= cols`, using the
/// shortest augmenting path method with row and column potentials. Among
/// equal reduced costs the lowest column index is taken.
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment, MatchingError> {
    let (n, m) = (costs.rows, costs.cols);
    if n > m {
        return Err(MatchingError::TooManyRows { rows: n, cols: m });
    }
    if n == 0 {
        return Ok(Assignment::empty(m));
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // row (1-based) assigned to each column; 0 = free
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut col_of_row = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    let pairs: Vec<(usize, usize)> = col_of_row.iter().enumerate().map(|(r, &c)| (c, r)).collect();
    let total_cost = pairs.iter().map(|&(c, r)| costs.get(r, c)).sum();
    let unmatched_predictions = (1..=m).filter(|&j| p[j] == 0).map(|j| j - 1).collect();
    Ok(Assignment {
        pairs,
        unmatched_predictions,
        total_cost,
    })
}

/// The `k` unmatched predictions with the largest box score, in descending
/// score order (lower index first on ties).
pub fn select_pseudo(box_scores: &[f64], assignment: &Assignment, k: usize) -> Vec<usize> {
    let mut cand = assignment.unmatched_predictions.clone();
    cand.sort_by(|&a, &b| box_scores[b].total_cmp(&box_scores[a]).then(a.cmp(&b)));
    cand.truncate(k);
    cand
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxCCWH;
    use crate::supervision::Source;
    use proptest::prelude::*;

    /// Exhaustive minimum over all injective row -> column maps.
    fn brute_force(c: &CostMatrix) -> f64 {
        fn rec(c: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == c.rows() {
                *best = best.min(acc);
                return;
            }
            for col in 0..c.cols() {
                if !used[col] {
                    used[col] = true;
                    rec(c, row + 1, used, acc + c.get(row, col), best);
                    used[col] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, 0, &mut vec![false; c.cols()], 0.0, &mut best);
        best
    }

    #[test]
    fn three_by_three_fixture() {
        let c = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(1, 0), (0, 1), (2, 2)]);
        assert_eq!(a.total_cost, 5.0);
        assert_eq!(brute_force(&c), 5.0);
    }

    #[test]
    fn small_cases() {
        let c = CostMatrix::from_rows(&[vec![3.5]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 3.5);
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(hungarian(&c).unwrap().total_cost, 2.0);
        let c = CostMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(hungarian(&c), Err(MatchingError::TooManyRows { .. })));
        let c = CostMatrix::new(0, 3, vec![]).unwrap();
        assert_eq!(hungarian(&c).unwrap().unmatched_predictions, vec![0, 1, 2]);
        assert!(CostMatrix::from_rows(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn rectangular_leaves_columns_unmatched() {
        let c = CostMatrix::from_rows(&[vec![5.0, 1.0, 9.0, 4.0], vec![1.0, 6.0, 9.0, 3.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(1, 0), (0, 1)]);
        assert_eq!(a.unmatched_predictions, vec![2, 3]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn pseudo_selection() {
        let a = Assignment {
            pairs: vec![(0, 0)],
            unmatched_predictions: vec![1, 2],
            total_cost: 0.0,
        };
        let bs = [0.9, 0.1, 0.8];
        assert_eq!(select_pseudo(&bs, &a, 1), vec![2]);
        assert!(select_pseudo(&bs, &a, 0).is_empty());
        assert_eq!(select_pseudo(&bs, &a, 10), vec![2, 1]);
        let tie = Assignment::empty(3);
        assert_eq!(select_pseudo(&[0.5, 0.5, 0.5], &tie, 2), vec![0, 1]);
    }

    #[test]
    fn match_cost_fixtures() {
        let b = BoxCCWH::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let pred = Prediction {
            bbox: b,
            bs: 0.5,
            cls: vec![1.0, 0.0, 0.3],
        };
        let gt = SupervisionLabel::ground_truth(b, 0);
        assert_eq!(match_cost(&gt, &pred, MatchWeights::default()), -2.0);
        let d1 = SupervisionLabel {
            bbox: b,
            category: LabelCategory::Unknown,
            confidence: 0.9,
            source: Source::Distilled,
        };
        let d2 = SupervisionLabel { confidence: 0.4, ..d1 };
        let diff = match_cost(&d2, &pred, MatchWeights::default()) - match_cost(&d1, &pred, MatchWeights::default());
        assert!((diff - 0.5).abs() < 1e-15);
        // unknown labels read the last channel
        assert!((match_cost(&d1, &pred, MatchWeights::default()) - (-0.3 - 0.9)).abs() < 1e-15);
    }

    fn arb_costs() -> impl Strategy<Value = CostMatrix> {
        (1usize..=7)
            .prop_flat_map(|cols| (1usize..=cols, Just(cols)))
            .prop_flat_map(|(rows, cols)| proptest::collection::vec(-5.0..5.0f64, rows * cols).prop_map(move |d| CostMatrix::new(rows, cols, d).unwrap()))
    }

    fn cost_of(c: &CostMatrix, a: &Assignment) -> f64 {
        a.pairs.iter().map(|&(col, row)| c.get(row, col)).sum()
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(c in arb_costs()) {
            let a = hungarian(&c).unwrap();
            prop_assert_eq!(a.pairs.len(), c.rows());
            let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.0).chain(a.unmatched_predictions.iter().copied()).collect();
            cols.sort_unstable();
            prop_assert_eq!(cols, (0..c.cols()).collect::<Vec<_>>());
            prop_assert!((a.total_cost - brute_force(&c)).abs() < 1e-9);
            prop_assert!((a.total_cost - cost_of(&c, &a)).abs() < 1e-9);
        }

        #[test]
        fn row_shift_keeps_assignment_optimal(c in arb_costs(), row in 0usize..7, shift in -3.0..3.0f64) {
            let row = row % c.rows();
            let mut rows: Vec<Vec<f64>> = (0..c.rows()).map(|r| (0..c.cols()).map(|k| c.get(r, k)).collect()).collect();
            rows[row].iter_mut().for_each(|v| *v += shift);
            let shifted = CostMatrix::from_rows(&rows).unwrap();
            let a = hungarian(&shifted).unwrap();
            prop_assert!((cost_of(&c, &a) - brute_force(&c)).abs() < 1e-9);
        }

        #[test]
        fn pseudo_is_disjoint_and_sorted(bs in proptest::collection::vec(0.0..1.0f64, 1..12), matched in proptest::collection::vec(any::<bool>(), 12), k in 0usize..8) {
            let n = bs.len();
            let pairs: Vec<(usize, usize)> = (0..n).filter(|&i| matched[i]).enumerate().map(|(s, i)| (i, s)).collect();
            let a = Assignment {
                unmatched_predictions: (0..n).filter(|&i| !matched[i]).collect(),
                pairs,
                total_cost: 0.0,
            };
            let picked = select_pseudo(&bs, &a, k);
            prop_assert!(picked.len() <= k);
            prop_assert!(picked.iter().all(|i| !matched[*i]));
            for w in picked.windows(2) {
                prop_assert!(bs[w[0]] > bs[w[1]] || (bs[w[0]] == bs[w[1]] && w[0] < w[1]));
            }
            // nothing left out scores above the last pick
            if let Some(&last) = picked.last() {
                prop_assert!(a.unmatched_predictions.iter().filter(|i| !picked.contains(i)).all(|&i| bs[i] <= bs[last]));
            }
        }

        #[test]
        fn match_cost_monotone(s in 0.0..0.9f64, p in 0.0..0.9f64, d in 0.01..0.1f64, shift in 0.01..0.2f64) {
            let b = BoxCCWH::new(0.5, 0.5, 0.2, 0.2).unwrap();
            let pred = |p: f64, bbox: BoxCCWH| Prediction { bbox, bs: 0.5, cls: vec![0.1, p] };
            let label = |s: f64| SupervisionLabel::distilled(b, s);
            let w = MatchWeights::default();
            let base = match_cost(&label(s), &pred(p, b), w);
            prop_assert!(match_cost(&label(s + d), &pred(p, b), w) < base);
            prop_assert!(match_cost(&label(s), &pred(p + d, b), w) < base);
            let moved = BoxCCWH::new(0.5 + shift, 0.5, 0.2, 0.2).unwrap();
            prop_assert!(match_cost(&label(s), &pred(p, moved), w) > base);
        }
    }
}
