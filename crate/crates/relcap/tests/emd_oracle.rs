//! The transport solver checked against an independent brute force. Every
//! vertex of the transportation polytope is supported on a spanning tree of
//! the bipartite supply/demand graph, and on a tree the flows are forced by
//! the marginals. Enumerating all trees and keeping the cheapest feasible one
//! is therefore exact, and shares no code with the production solver.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use relcap::attn_eval::{cell_distance, emd, AttentionGrid};

fn grid(side: usize, cells: Vec<f64>) -> AttentionGrid {
    let total: f64 = cells.iter().sum();
    AttentionGrid::from_normalized(side, cells.iter().map(|c| c / total).collect())
        .expect("normalized grid")
}

/// Flows forced by leaf peeling on one candidate tree; `None` when the edge
/// set has a cycle or demands a negative flow.
fn tree_cost(
    side: usize,
    sources: &[(usize, f64)],
    sinks: &[(usize, f64)],
    mask: u32,
) -> Option<f64> {
    let (m, n) = (sources.len(), sinks.len());
    let mut edges = Vec::new();
    for s in 0..m {
        for t in 0..n {
            if mask >> (s * n + t) & 1 == 1 {
                edges.push((s, t));
            }
        }
    }
    let mut deg = vec![0usize; m + n];
    for &(s, t) in &edges {
        deg[s] += 1;
        deg[m + t] += 1;
    }
    if deg.iter().any(|&d| d == 0) {
        return None;
    }
    let mut supply: Vec<f64> = sources.iter().map(|x| x.1).collect();
    let mut demand: Vec<f64> = sinks.iter().map(|x| x.1).collect();
    let mut active = vec![true; edges.len()];
    let mut remaining = edges.len();
    let mut cost = 0.0;
    while remaining > 0 {
        let mut progressed = false;
        for (ei, &(s, t)) in edges.iter().enumerate() {
            if !active[ei] {
                continue;
            }
            let flow = if deg[s] == 1 {
                supply[s]
            } else if deg[m + t] == 1 {
                demand[t]
            } else {
                continue;
            };
            if flow < -1e-12 {
                return None;
            }
            cost += flow.max(0.0) * cell_distance(side, sources[s].0, sinks[t].0);
            supply[s] -= flow;
            demand[t] -= flow;
            active[ei] = false;
            deg[s] -= 1;
            deg[m + t] -= 1;
            remaining -= 1;
            progressed = true;
        }
        if !progressed {
            return None;
        }
    }
    Some(cost)
}

fn brute_force_emd(side: usize, a: &AttentionGrid, b: &AttentionGrid) -> f64 {
    let sources: Vec<(usize, f64)> =
        a.cells().iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, &v)| (i, v)).collect();
    let sinks: Vec<(usize, f64)> =
        b.cells().iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, &v)| (i, v)).collect();
    let (m, n) = (sources.len(), sinks.len());
    assert!(m * n <= 20, "brute force only handles small supports, got {m}x{n}");
    let need = (m + n - 1) as u32;
    let mut best = f64::INFINITY;
    for mask in 0u32..1 << (m * n) {
        if mask.count_ones() != need {
            continue;
        }
        if let Some(c) = tree_cost(side, &sources, &sinks, mask) {
            best = best.min(c);
        }
    }
    assert!(best.is_finite(), "no feasible tree found");
    best
}

fn sparse_grid(rng: &mut ChaCha12Rng, side: usize, support: usize) -> AttentionGrid {
    let cells = side * side;
    let mut mass = vec![0.0; cells];
    let mut placed = 0;
    while placed < support {
        let c = rng.gen_range(0..cells);
        if mass[c] == 0.0 {
            mass[c] = rng.gen_range(0.1..1.0);
            placed += 1;
        }
    }
    grid(side, mass)
}

#[test]
fn solver_agrees_with_tree_enumeration_on_three_by_three() {
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..60 {
        let sa = rng.gen_range(1..=4);
        let sb = rng.gen_range(1..=(20 / sa).min(4));
        let a = sparse_grid(&mut rng, 3, sa);
        let b = sparse_grid(&mut rng, 3, sb);
        let fast = emd(&a, &b).unwrap();
        let slow = brute_force_emd(3, &a, &b);
        let d = (fast - slow).abs();
        worst = worst.max(d);
        assert!(d < 1e-6, "case {case}: solver {fast} vs enumeration {slow}");
    }
    assert!(worst < 1e-6);
}

#[test]
fn point_masses_pay_the_cell_distance() {
    for (i, j) in [(0, 8), (4, 4), (2, 6), (0, 1)] {
        let mut a = vec![0.0; 9];
        let mut b = vec![0.0; 9];
        a[i] = 1.0;
        b[j] = 1.0;
        let d = emd(&grid(3, a), &grid(3, b)).unwrap();
        assert!((d - cell_distance(3, i, j)).abs() < 1e-12, "{i}->{j}: {d}");
    }
}

#[test]
fn split_destination_weighs_each_branch() {
    // corner mass moving half one cell right, half two cells right
    let mut a = vec![0.0; 9];
    a[0] = 1.0;
    let mut b = vec![0.0; 9];
    b[1] = 0.5;
    b[2] = 0.5;
    let d = emd(&grid(3, a), &grid(3, b)).unwrap();
    assert!((d - 1.5).abs() < 1e-12, "got {d}");
}

fn mass_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01f64..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn distance_to_self_is_zero(cells in mass_vec(16)) {
        let a = grid(4, cells);
        prop_assert!(emd(&a, &a).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn distance_is_symmetric(xs in mass_vec(16), ys in mass_vec(16)) {
        let a = grid(4, xs);
        let b = grid(4, ys);
        prop_assert!((emd(&a, &b).unwrap() - emd(&b, &a).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn triangle_inequality_holds(xs in mass_vec(16), ys in mass_vec(16), zs in mass_vec(16)) {
        let a = grid(4, xs);
        let b = grid(4, ys);
        let c = grid(4, zs);
        let ab = emd(&a, &b).unwrap();
        let bc = emd(&b, &c).unwrap();
        let ac = emd(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9, "{ac} > {ab} + {bc}");
    }
}

#[test]
fn full_grid_properties_hold_at_evaluation_size() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let a = grid(14, (0..196).map(|_| rng.gen_range(0.01..1.0)).collect());
    let b = grid(14, (0..196).map(|_| rng.gen_range(0.01..1.0)).collect());
    assert!(emd(&a, &a).unwrap().abs() <= 1e-9);
    assert!((emd(&a, &b).unwrap() - emd(&b, &a).unwrap()).abs() <= 1e-9);
    assert!(emd(&a, &b).unwrap() >= 0.0);
}
