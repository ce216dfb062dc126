//! Exact 1-Wasserstein distance between small discrete measures on the
//! per-mille screen, via min-cost flow on integer-scaled masses.

use crate::action::{spatial_distance, Metric, Point};

use super::AnalyticsError;

/// Screen diameter in per-mille units.
pub const DIAMETER: f64 = 1000.0 * std::f64::consts::SQRT_2;
pub const MAX_SUPPORT: usize = 256;
const SCALE: u64 = 1 << 40;

/// Scale masses to integers summing exactly to SCALE (largest remainder).
fn quantize(w: &[f64], total: f64) -> Vec<u64> {
    let raw: Vec<f64> = w.iter().map(|m| m / total * SCALE as f64).collect();
    let mut q: Vec<u64> = raw.iter().map(|r| r.floor() as u64).collect();
    let short = SCALE - q.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(short as usize) {
        q[i] += 1;
    }
    q
}

/// Optimal transport cost with Euclidean ground cost, unnormalized.
pub fn wasserstein(a: &[(Point, f64)], b: &[(Point, f64)]) -> Result<f64, AnalyticsError> {
    let check = |m: &[(Point, f64)], side: &str| -> Result<f64, AnalyticsError> {
        if m.is_empty() || m.len() > MAX_SUPPORT {
            return Err(AnalyticsError::InvalidMeasure(format!("{side} support size {} not in 1..={MAX_SUPPORT}", m.len())));
        }
        if m.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(AnalyticsError::InvalidMeasure(format!("{side} has a negative or non-finite mass")));
        }
        Ok(m.iter().map(|(_, w)| w).sum())
    };
    let (ta, tb) = (check(a, "first")?, check(b, "second")?);
    if ta <= 0.0 || (ta - tb).abs() > 1e-9 * ta.max(tb) {
        return Err(AnalyticsError::InvalidMeasure(format!("total masses differ: {ta} vs {tb}")));
    }
    let supply = quantize(&a.iter().map(|x| x.1).collect::<Vec<_>>(), ta);
    let demand = quantize(&b.iter().map(|x| x.1).collect::<Vec<_>>(), tb);
    let cost: Vec<Vec<f64>> =
        a.iter().map(|(p, _)| b.iter().map(|(q, _)| spatial_distance(*p, *q, Metric::L2)).collect()).collect();
    let flow = min_cost_transport(&supply, &demand, &cost);
    let mut total = 0.0;
    for (i, row) in flow.iter().enumerate() {
        for (j, f) in row.iter().enumerate() {
            total += *f as f64 * cost[i][j];
        }
    }
    Ok(total / SCALE as f64 * ta)
}

/// W₁ divided by the screen diameter, in [0,1] for unit-mass measures.
pub fn wasserstein_norm(a: &[(Point, f64)], b: &[(Point, f64)]) -> Result<f64, AnalyticsError> {
    Ok(wasserstein(a, b)? / DIAMETER)
}

/// Successive shortest paths with potentials on the complete bipartite
/// network. Residual reverse arcs carry the flow already shipped.
fn min_cost_transport(supply: &[u64], demand: &[u64], cost: &[Vec<f64>]) -> Vec<Vec<u64>> {
    let (m, n) = (supply.len(), demand.len());
    let mut flow = vec![vec![0u64; n]; m];
    let mut left_s = supply.to_vec();
    let mut left_d = demand.to_vec();
    // potentials: rows then columns
    let mut pot = vec![0.0f64; m + n];
    loop {
        if left_s.iter().all(|s| *s == 0) {
            break;
        }
        // Dijkstra from all rows with remaining supply (dense, O(V²))
        let nodes = m + n;
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        for i in 0..m {
            if left_s[i] > 0 {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            for v in 0..nodes {
                if !done[v] && dist[v].is_finite() && (u == usize::MAX || dist[v] < dist[u]) {
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < m {
                for j in 0..n {
                    let v = m + j;
                    let rc = cost[u][j] + pot[u] - pot[v];
                    let nd = dist[u] + rc.max(0.0);
                    if !done[v] && nd < dist[v] {
                        dist[v] = nd;
                        prev[v] = u;
                    }
                }
            } else {
                let j = u - m;
                for i in 0..m {
                    if flow[i][j] > 0 {
                        let rc = -cost[i][j] + pot[u] - pot[i];
                        let nd = dist[u] + rc.max(0.0);
                        if !done[i] && nd < dist[i] {
                            dist[i] = nd;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        // cheapest reachable column with remaining demand
        let target = (0..n)
            .filter(|&j| left_d[j] > 0 && dist[m + j].is_finite())
            .min_by(|&x, &y| dist[m + x].total_cmp(&dist[m + y]))
            .expect("balanced totals leave a reachable sink");
        // nodes farther than the sink are capped at its distance, which keeps
        // every residual reduced cost nonnegative
        let cap = dist[m + target];
        for v in 0..nodes {
            pot[v] += dist[v].min(cap);
        }
        // walk back to a source row and find the bottleneck
        let mut path = vec![m + target];
        let mut v = m + target;
        while prev[v] != usize::MAX {
            v = prev[v];
            path.push(v);
        }
        path.reverse();
        let src = path[0];
        let mut amt = left_s[src].min(left_d[target]);
        for w in path.windows(2) {
            if w[0] >= m {
                // column → row: undo existing flow
                amt = amt.min(flow[w[1]][w[0] - m]);
            }
        }
        for w in path.windows(2) {
            if w[0] < m {
                flow[w[0]][w[1] - m] += amt;
            } else {
                flow[w[1]][w[0] - m] -= amt;
            }
        }
        left_s[src] -= amt;
        left_d[target] -= amt;
    }
    flow
}
