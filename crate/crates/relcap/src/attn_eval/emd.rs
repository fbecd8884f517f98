//! Exact earth mover's distance between attention grids.
//!
//! Ground distance is Euclidean between cell centers, in units of one cell
//! side. The transport problem is solved exactly by successive shortest
//! augmenting paths with node potentials over the bipartite excess/deficit
//! graph. Costs are scaled to integers at 1e-12 resolution so path
//! comparisons inside Dijkstra are exact; the ground distance never exceeds
//! ~19 cells, so scaled path costs stay far below i64 range.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::raster::{AttentionGrid, AttnError};

const COST_SCALE: f64 = 1e12;
/// Cells at or below this mass are left out of the transport graph.
const MASS_EPS: f64 = 1e-12;

/// Euclidean distance between cell centers, in cell units.
pub fn cell_distance(side: usize, a: usize, b: usize) -> f64 {
    let (ar, ac) = ((a / side) as f64, (a % side) as f64);
    let (br, bc) = ((b / side) as f64, (b % side) as f64);
    ((ar - br).powi(2) + (ac - bc).powi(2)).sqrt()
}

/// Largest distance between any two cell centers.
pub fn grid_diameter(side: usize) -> f64 {
    let d = (side - 1) as f64;
    (2.0 * d * d).sqrt()
}

/// Exact minimal transport cost between two normalized grids.
///
/// Mass common to both grids stays in place (the ground distance is a
/// metric, so moving it never helps); only the excess of one grid over the
/// other is routed.
pub fn emd(p: &AttentionGrid, q: &AttentionGrid) -> Result<f64, AttnError> {
    if p.side() != q.side() {
        return Err(AttnError::SideMismatch(p.side(), q.side()));
    }
    for g in [p, q] {
        let sum = g.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(AttnError::NotNormalized { sum });
        }
    }
    let side = p.side();
    let mut sources: Vec<(usize, f64)> = Vec::new();
    let mut sinks: Vec<(usize, f64)> = Vec::new();
    for (i, (pv, qv)) in p.cells().iter().zip(q.cells()).enumerate() {
        let diff = pv - qv;
        if diff > MASS_EPS {
            sources.push((i, diff));
        } else if diff < -MASS_EPS {
            sinks.push((i, -diff));
        }
    }
    if sources.is_empty() || sinks.is_empty() {
        return Ok(0.0);
    }

    let ns = sources.len();
    let nt = sinks.len();
    let cost: Vec<i64> = sources
        .iter()
        .flat_map(|(ci, _)| {
            sinks
                .iter()
                .map(|(cj, _)| (cell_distance(side, *ci, *cj) * COST_SCALE).round() as i64)
                .collect::<Vec<_>>()
        })
        .collect();

    let mut supply: Vec<f64> = sources.iter().map(|(_, m)| *m).collect();
    let mut demand: Vec<f64> = sinks.iter().map(|(_, m)| *m).collect();
    let mut flow = vec![0.0f64; ns * nt];
    // Node ids: 0..ns sources, ns..ns+nt sinks.
    let n = ns + nt;
    let mut potential = vec![0i64; n];

    let total_to_move: f64 = supply.iter().sum::<f64>().min(demand.iter().sum());
    let mut moved = 0.0f64;
    let mut total_cost = 0.0f64;
    // Each augmentation zeroes a supply, a demand, or a flow entry; the
    // budget is generous beyond any reachable case.
    let budget = 4 * (ns + nt) * (ns + nt) + 64;
    let mut rounds = 0usize;

    while total_to_move - moved > MASS_EPS {
        rounds += 1;
        if rounds > budget {
            return Err(AttnError::SolverStuck);
        }
        // Multi-source Dijkstra over reduced costs from all sources with
        // remaining supply.
        const UNSEEN: i64 = i64::MAX;
        let mut dist = vec![UNSEEN; n];
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut heap: BinaryHeap<Reverse<(i64, usize)>> = BinaryHeap::new();
        for (i, s) in supply.iter().enumerate() {
            if *s > MASS_EPS {
                dist[i] = 0;
                heap.push(Reverse((0, i)));
            }
        }
        let mut settled = vec![false; n];
        while let Some(Reverse((d, u))) = heap.pop() {
            if settled[u] {
                continue;
            }
            settled[u] = true;
            if u < ns {
                // Forward edges to every sink.
                for j in 0..nt {
                    let v = ns + j;
                    if settled[v] {
                        continue;
                    }
                    let rc = cost[u * nt + j] + potential[u] - potential[v];
                    debug_assert!(rc >= 0, "reduced cost must stay nonnegative");
                    let nd = d + rc;
                    if nd < dist[v] {
                        dist[v] = nd;
                        parent[v] = Some(u);
                        heap.push(Reverse((nd, v)));
                    }
                }
            } else {
                // Residual edges back to sources with positive flow.
                let j = u - ns;
                for i in 0..ns {
                    if settled[i] || flow[i * nt + j] <= MASS_EPS {
                        continue;
                    }
                    let rc = -cost[i * nt + j] + potential[u] - potential[i];
                    debug_assert!(rc >= 0, "reduced cost must stay nonnegative");
                    let nd = d + rc;
                    if nd < dist[i] {
                        dist[i] = nd;
                        parent[i] = Some(u);
                        heap.push(Reverse((nd, i)));
                    }
                }
            }
        }

        let target = (0..nt)
            .filter(|j| demand[*j] > MASS_EPS && dist[ns + j] < UNSEEN)
            .min_by_key(|j| dist[ns + j]);
        let Some(tj) = target else {
            // Only sub-epsilon crumbs of demand remain.
            break;
        };

        // Walk back to the originating source, collecting the bottleneck.
        let mut path: Vec<usize> = vec![ns + tj];
        while let Some(prev) = parent[*path.last().unwrap()] {
            path.push(prev);
        }
        let origin = *path.last().unwrap();
        debug_assert!(origin < ns && supply[origin] > MASS_EPS);
        let mut delta = supply[origin].min(demand[tj]).min(total_to_move - moved);
        for pair in path.windows(2) {
            let (to, from) = (pair[0], pair[1]);
            if from >= ns {
                // Backward edge sink→source being traversed source→sink in
                // the path direction; its residual is the existing flow.
                let (i, j) = (to, from - ns);
                delta = delta.min(flow[i * nt + j]);
            }
        }
        debug_assert!(delta > 0.0);

        for pair in path.windows(2) {
            let (to, from) = (pair[0], pair[1]);
            if from < ns {
                let (i, j) = (from, to - ns);
                flow[i * nt + j] += delta;
                total_cost += cost[i * nt + j] as f64 * delta;
            } else {
                let (i, j) = (to, from - ns);
                flow[i * nt + j] -= delta;
                total_cost -= cost[i * nt + j] as f64 * delta;
            }
        }
        supply[origin] -= delta;
        demand[tj] -= delta;
        moved += delta;

        // Capping the update at the target's distance keeps reduced costs
        // nonnegative even for nodes Dijkstra never reached.
        let dt = dist[ns + tj];
        for v in 0..n {
            potential[v] += dist[v].min(dt);
        }
    }

    Ok(total_cost / COST_SCALE)
}
