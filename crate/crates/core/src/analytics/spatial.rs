//! DBSCAN over per-mille points with a uniform grid index.

use std::collections::HashMap;

use crate::action::{spatial_distance, Metric, Point};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialClustering {
    /// Cluster id per point. Dense clusters come first, numbered by their
    /// lowest core index; noise singletons follow in point order.
    pub labels: Vec<usize>,
    pub noise: Vec<bool>,
    /// Number of dense clusters, excluding noise singletons.
    pub dense: usize,
}

impl SpatialClustering {
    pub fn clusters(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[Point], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(*p, cell)).or_default().push(i);
        }
        Grid { cell, cells }
    }

    fn key(p: Point, cell: f64) -> (i64, i64) {
        ((p.x as f64 / cell).floor() as i64, (p.y as f64 / cell).floor() as i64)
    }

    /// Indices within `eps` of point `i` (itself included), ascending.
    fn neighbors(&self, points: &[Point], i: usize, eps: f64, metric: Metric) -> Vec<usize> {
        let (cx, cy) = Self::key(points[i], self.cell);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(v) = self.cells.get(&(cx + dx, cy + dy)) {
                    out.extend(v.iter().copied().filter(|&j| spatial_distance(points[i], points[j], metric) <= eps));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Standard DBSCAN: a point with at least `min_pts` points (itself
/// included) within `eps` is a core point. Border points join the first
/// cluster that reaches them, which is the adjacent cluster with the
/// lowest core index. Noise points become singleton clusters.
pub fn cluster_spatial(points: &[Point], eps: f64, metric: Metric, min_pts: usize) -> SpatialClustering {
    const UNSET: usize = usize::MAX;
    let n = points.len();
    // cells at least 1 wide keep the 3×3 neighborhood exact for tiny eps
    let grid = Grid::new(points, eps.max(1.0));
    let neigh: Vec<Vec<usize>> = (0..n).map(|i| grid.neighbors(points, i, eps, metric)).collect();
    let core: Vec<bool> = neigh.iter().map(|v| v.len() >= min_pts.max(1)).collect();
    let mut labels = vec![UNSET; n];
    let mut next = 0;
    for i in 0..n {
        if !core[i] || labels[i] != UNSET {
            continue;
        }
        labels[i] = next;
        let mut stack = vec![i];
        while let Some(p) = stack.pop() {
            for &q in &neigh[p] {
                if labels[q] == UNSET {
                    labels[q] = next;
                    if core[q] {
                        stack.push(q);
                    }
                }
            }
        }
        next += 1;
    }
    let dense = next;
    let mut noise = vec![false; n];
    for i in 0..n {
        if labels[i] == UNSET {
            labels[i] = next;
            noise[i] = true;
            next += 1;
        }
    }
    SpatialClustering { labels, noise, dense }
}

/// Member minimizing the summed distance to the others; ties go to the
/// lowest index.
pub fn medoid(points: &[Point], members: &[usize], metric: Metric) -> usize {
    let cost = |i: usize| -> f64 { members.iter().map(|&j| spatial_distance(points[i], points[j], metric)).sum() };
    let mut best = members[0];
    let mut best_cost = cost(best);
    for &i in &members[1..] {
        let c = cost(i);
        if c < best_cost {
            best = i;
            best_cost = c;
        }
    }
    best
}
