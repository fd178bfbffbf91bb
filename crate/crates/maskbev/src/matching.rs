//! Bipartite matching between queries and ground-truth objects.
//!
//! The assignment solver is the O(n^3) shortest-augmenting-path algorithm
//! with row/column potentials, run on the transposed matrix when there are
//! more rows than columns so it always sees rows <= cols. Tests and the
//! acceptance suite cross-check it against exhaustive permutation
//! enumeration on small instances.

use crate::queries::ANCHOR_DIM;
use crate::scene::SceneObject;
use crate::tensor::{Scalar, Tensor};

/// Injective assignment of `min(n, m)` (row, column) pairs, sorted by row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn total_cost(&self, cost: &[f64], cols: usize) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum()
    }
}

/// Minimum-total-cost assignment over a row-major `n x m` cost matrix.
pub fn hungarian_match(cost: &[f64], n: usize, m: usize) -> MatchResult {
    assert_eq!(cost.len(), n * m, "cost matrix must be n*m");
    assert!(
        cost.iter().all(|c| c.is_finite()),
        "hungarian_match requires finite costs"
    );
    if n == 0 || m == 0 {
        return MatchResult { pairs: Vec::new() };
    }
    let mut pairs = if n <= m {
        solve_rows_le_cols(&|i, j| cost[i * m + j], n, m)
    } else {
        solve_rows_le_cols(&|i, j| cost[j * m + i], m, n)
            .into_iter()
            .map(|(r, c)| (c, r))
            .collect()
    };
    pairs.sort_unstable();
    MatchResult { pairs }
}

/// Shortest augmenting path assignment for `n <= m` (1-indexed internals).
fn solve_rows_le_cols(cost: &dyn Fn(usize, usize) -> f64, n: usize, m: usize) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut assigned_row = vec![0usize; m + 1]; // p[j]: row assigned to column j
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    (1..=m)
        .filter(|&j| assigned_row[j] != 0)
        .map(|j| (assigned_row[j] - 1, j - 1))
        .collect()
}

/// Exhaustive minimum assignment for small instances; the independent
/// oracle for [`hungarian_match`].
pub fn brute_force_match(cost: &[f64], n: usize, m: usize) -> (f64, Vec<(usize, usize)>) {
    assert!(n.min(m) <= 8, "brute force is factorial; keep min(n,m) <= 8");
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let at = |r: usize, c: usize| {
        if transposed {
            cost[c * m + r]
        } else {
            cost[r * m + c]
        }
    };
    let mut best = (f64::INFINITY, Vec::new());
    let mut chosen = vec![false; cols];
    let mut current = Vec::with_capacity(rows);
    fn recurse(
        r: usize,
        rows: usize,
        cols: usize,
        at: &dyn Fn(usize, usize) -> f64,
        chosen: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        acc: f64,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if r == rows {
            if acc < best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        for c in 0..cols {
            if !chosen[c] {
                chosen[c] = true;
                current.push((r, c));
                recurse(r + 1, rows, cols, at, chosen, current, acc + at(r, c), best);
                current.pop();
                chosen[c] = false;
            }
        }
    }
    recurse(0, rows, cols, &at, &mut chosen, &mut current, 0.0, &mut best);
    let pairs = if transposed {
        let mut p: Vec<(usize, usize)> = best.1.into_iter().map(|(r, c)| (c, r)).collect();
        p.sort_unstable();
        p
    } else {
        best.1
    };
    (best.0, pairs)
}

/// The 8 regression targets of a ground-truth box relative to an anchor.
pub fn encode_box_targets(gt: &SceneObject, anchor: &[f64]) -> [f64; 8] {
    assert_eq!(anchor.len(), ANCHOR_DIM);
    [
        gt.x - anchor[0],
        gt.y - anchor[1],
        gt.z,
        gt.l.ln(),
        gt.w.ln(),
        gt.h.ln(),
        gt.theta.sin(),
        gt.theta.cos(),
    ]
}

/// Matching cost between every query and every ground-truth object:
/// classification term plus the L1 distance in the regression space.
pub fn detection_cost<T: Scalar>(
    class_logits: &Tensor<T>,
    box_params: &Tensor<T>,
    anchors: &[f64],
    objects: &[SceneObject],
    cls_weight: f64,
    box_weight: f64,
) -> Vec<f64> {
    let n = class_logits.shape()[0];
    let kp1 = class_logits.shape()[1];
    let g = objects.len();
    let probs = class_logits.detach().softmax(1);
    let mut cost = vec![0.0; n * g];
    for q in 0..n {
        let prow = &probs.data()[q * kp1..(q + 1) * kp1];
        let brow: Vec<f64> = box_params.data()[q * 8..(q + 1) * 8]
            .iter()
            .map(|v| v.to_f64().unwrap())
            .collect();
        let anchor = &anchors[q * ANCHOR_DIM..(q + 1) * ANCHOR_DIM];
        for (gi, obj) in objects.iter().enumerate() {
            assert!(obj.c < kp1 - 1, "object class {} outside head width", obj.c);
            let p_class = prow[obj.c].to_f64().unwrap();
            let target = encode_box_targets(obj, anchor);
            let l1: f64 = brow
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 8.0;
            cost[q * g + gi] = cls_weight * (-p_class) + box_weight * l1;
        }
    }
    cost
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_picks_the_cross_pairing() {
        let cost = vec![1.0, 2.0, 3.0, 0.0];
        let result = hungarian_match(&cost, 2, 2);
        assert_eq!(result.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(result.total_cost(&cost, 2), 1.0);
    }

    #[test]
    fn diagonal_zero_square_is_identity() {
        let n = 5;
        let mut cost = vec![1.0; n * n];
        for i in 0..n {
            cost[i * n + i] = 0.0;
        }
        let result = hungarian_match(&cost, n, n);
        assert_eq!(result.pairs, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(result.total_cost(&cost, n), 0.0);
    }

    #[test]
    fn one_by_one_matches_the_single_pair() {
        let result = hungarian_match(&[4.25], 1, 1);
        assert_eq!(result.pairs, vec![(0, 0)]);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..300 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(1..=6);
            let cost: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let fast = hungarian_match(&cost, n, m);
            let (best, _) = brute_force_match(&cost, n, m);
            let total = fast.total_cost(&cost, m);
            assert!(
                (total - best).abs() < 1e-9,
                "trial {trial}: hungarian {total} vs brute force {best} (n={n}, m={m})"
            );
            assert_eq!(fast.pairs.len(), n.min(m));
            // injectivity on both sides
            let mut rows: Vec<usize> = fast.pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<usize> = fast.pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(rows.len(), fast.pairs.len());
            assert_eq!(cols.len(), fast.pairs.len());
        }
    }

    #[test]
    fn scaling_both_weights_preserves_the_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::from_vec((0..5 * 4).map(|_| rng.gen_range(-1.0..1.0f64)).collect(), &[5, 4]);
        let boxes = Tensor::from_vec((0..5 * 8).map(|_| rng.gen_range(-1.0..1.0f64)).collect(), &[5, 8]);
        let anchors: Vec<f64> = (0..5 * 7).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let objects: Vec<SceneObject> = (0..3)
            .map(|i| SceneObject {
                c: i % 3,
                x: i as f64,
                y: -(i as f64),
                z: 0.5,
                l: 2.0,
                w: 1.0,
                h: 1.5,
                theta: 0.3,
            })
            .collect();
        let base = detection_cost(&logits, &boxes, &anchors, &objects, 2.0, 0.25);
        let doubled = detection_cost(&logits, &boxes, &anchors, &objects, 4.0, 0.5);
        for (a, b) in base.iter().zip(&doubled) {
            assert!((2.0 * a - b).abs() < 1e-9, "doubling weights must double costs");
        }
        assert_eq!(
            hungarian_match(&base, 5, 3).pairs,
            hungarian_match(&doubled, 5, 3).pairs
        );
    }

    #[test]
    fn perfect_prediction_is_the_row_minimum() {
        let objects = vec![SceneObject {
            c: 0,
            x: 3.0,
            y: -2.0,
            z: 0.8,
            l: 4.0,
            w: 2.0,
            h: 1.5,
            theta: 0.5,
        }];
        let anchors = vec![2.0, -1.0, 0.0, 2.25, 0.7, 1.7, 0.0, 0.0, 0.0, 0.0, 2.25, 0.7, 1.7, 0.0];
        let target = encode_box_targets(&objects[0], &anchors[..7]);
        // query 0 predicts the exact regression targets with high class
        // confidence; query 1 predicts garbage.
        let mut boxes = vec![0.5f64; 2 * 8];
        boxes[..8].copy_from_slice(&target);
        let logits = Tensor::from_vec(vec![6.0, -3.0, -3.0, -3.0, 0.0, 0.0], &[2, 3]);
        let boxes = Tensor::from_vec(boxes, &[2, 8]);
        let cost = detection_cost(&logits, &boxes, &anchors, &objects, 2.0, 0.25);
        assert!(cost[0] < cost[1], "perfect query must win its column");
    }
}
