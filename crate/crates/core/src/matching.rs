//! Bipartite set matching between predictions and ground truth.
//!
//! Matching is a data-association step: costs are computed from detached
//! values and gradients never flow through an assignment.

use crate::geom::{manhattan, Point};
use crate::scene::{AgentGT, MapInstanceGT};

/// One-to-one pairing between prediction rows and GT columns. Indices beyond
/// `min(rows, cols)` on the longer side stay unmatched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// (prediction index, gt index), sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn gt_of(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == pred).map(|(_, g)| *g)
    }

    pub fn pred_of(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|(_, g)| *g == gt).map(|(p, _)| *p)
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost[p][g]).sum()
    }
}

/// Minimum-total-cost assignment of a rectangular cost matrix.
///
/// Costs must be finite; encode "forbidden" as a large sentinel. O(n³) in
/// max(rows, cols) via the potentials formulation, with the matrix padded
/// square by zero-cost dummies that cannot change which real pairs win.
pub fn hungarian(cost: &[Vec<f64>]) -> Assignment {
    let m = cost.len();
    let n = cost.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Assignment { pairs: Vec::new() };
    }
    for row in cost {
        assert_eq!(row.len(), n, "ragged cost matrix");
        assert!(row.iter().all(|c| c.is_finite()), "non-finite matching cost");
    }
    let size = m.max(n);
    let at = |i: usize, j: usize| -> f64 {
        if i < m && j < n {
            cost[i][j]
        } else {
            0.0
        }
    };

    // Shortest-augmenting-path Hungarian with row/column potentials.
    // p[j] is the 1-based row currently assigned to column j.
    let mut u = vec![0.0f64; size + 1];
    let mut v = vec![0.0f64; size + 1];
    let mut p = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
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

    let mut pairs: Vec<(usize, usize)> = (1..=size)
        .filter_map(|j| {
            let i = p[j];
            (i >= 1 && i - 1 < m && j - 1 < n).then_some((i - 1, j - 1))
        })
        .collect();
    pairs.sort_unstable();
    Assignment { pairs }
}

/// Polyline point order used when comparing a prediction to a GT instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Forward,
    Reversed,
}

/// Chosen traversal order of the GT polyline and its summed Manhattan cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMatching {
    pub orientation: Orientation,
    pub cost: f64,
}

impl PointMatching {
    /// GT point index paired with prediction point `k` of an `n`-point line.
    pub fn gt_index(&self, k: usize, n: usize) -> usize {
        match self.orientation {
            Orientation::Forward => k,
            Orientation::Reversed => n - 1 - k,
        }
    }
}

/// Picks forward or fully reversed GT point order, whichever has the lower
/// summed Manhattan distance. Ties keep forward order.
pub fn match_points(pred: &[Point], gt: &[Point]) -> PointMatching {
    assert_eq!(pred.len(), gt.len(), "point count mismatch");
    let n = gt.len();
    let fwd: f64 = (0..n).map(|k| manhattan(pred[k], gt[k])).sum();
    let rev: f64 = (0..n).map(|k| manhattan(pred[k], gt[n - 1 - k])).sum();
    if rev < fwd {
        PointMatching { orientation: Orientation::Reversed, cost: rev }
    } else {
        PointMatching { orientation: Orientation::Forward, cost: fwd }
    }
}

/// Hungarian matching of predicted map instances to GT instances.
///
/// cost(i, j) = w_cls · (1 − score_i[class_j]) + w_geo · mean point cost under
/// the better point orientation. Returns per-pair point matchings aligned with
/// `Assignment::pairs`.
pub fn match_map_instances(
    scores: &[Vec<f64>],
    points: &[Vec<Point>],
    gt: &[MapInstanceGT],
    w_cls: f64,
    w_geo: f64,
) -> (Assignment, Vec<PointMatching>) {
    assert_eq!(scores.len(), points.len(), "scores/points length mismatch");
    let cost: Vec<Vec<f64>> = (0..points.len())
        .map(|i| {
            gt.iter()
                .map(|g| {
                    let pm = match_points(&points[i], &g.points);
                    let mean_geo = pm.cost / g.points.len().max(1) as f64;
                    w_cls * (1.0 - scores[i][g.class_id]) + w_geo * mean_geo
                })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let point_matchings = assignment
        .pairs
        .iter()
        .map(|&(i, j)| match_points(&points[i], &gt[j].points))
        .collect();
    (assignment, point_matchings)
}

/// Hungarian matching of predicted agents to GT agents.
///
/// cost(i, j) = w_cls · (1 − score_i[class_j]) + w_geo · Manhattan center
/// distance.
pub fn match_agents(
    scores: &[Vec<f64>],
    centers: &[Point],
    gt: &[AgentGT],
    w_cls: f64,
    w_geo: f64,
) -> Assignment {
    assert_eq!(scores.len(), centers.len(), "scores/centers length mismatch");
    let cost: Vec<Vec<f64>> = (0..centers.len())
        .map(|i| {
            gt.iter()
                .map(|g| w_cls * (1.0 - scores[i][g.class_id]) + w_geo * manhattan(centers[i], g.center))
                .collect()
        })
        .collect();
    hungarian(&cost)
}
