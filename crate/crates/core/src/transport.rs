//! Optimal class-selection plan for the Myopic policy.
//!
//! With masses `R(c,d) = Q(c,d) nu(d)` the program is a balanced
//! transportation problem with row demands `b`, column supplies `nu` and
//! profit `a`. It is solved exactly by successive shortest paths; among all
//! optimal plans the one of maximum entropy is returned, so the result does
//! not depend on the order in which the solver meets tied cells.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QPlan {
    /// Conditional weights `Q(c,d)`; every column sums to one.
    pub plan: Vec<Vec<f64>>,
    /// Joint masses `R(c,d) = Q(c,d) nu(d)`; rows sum to `b`, columns to `nu`.
    pub mass: Vec<Vec<f64>>,
    /// `sum R(c,d) a(c,d) / N`, the per-arrival edge probability of the plan.
    pub objective: f64,
}

impl QPlan {
    pub fn q(&self, c: usize, d: usize) -> f64 {
        self.plan[c][d]
    }

    /// Largest violation of the row, column and sign constraints.
    pub fn marginal_error(&self, params: &ModelParams) -> f64 {
        let (cn, dn) = (params.c(), params.d());
        let mut err: f64 = 0.0;
        for c in 0..cn {
            let row: f64 = (0..dn).map(|d| self.plan[c][d] * params.arrival_law[d]).sum();
            err = err.max((row - params.budgets[c]).abs());
        }
        for d in 0..dn {
            if params.arrival_law[d] > 0.0 {
                let col: f64 = (0..cn).map(|c| self.plan[c][d]).sum();
                err = err.max((col - 1.0).abs());
            }
        }
        for row in &self.plan {
            for &q in row {
                err = err.max(-q);
            }
        }
        err
    }
}

const SUPPORT_EPS: f64 = 1e-14;

pub fn solve_qstar(params: &ModelParams) -> Result<QPlan> {
    let b = &params.budgets;
    let nu = &params.arrival_law;
    let gap = (b.iter().sum::<f64>() - nu.iter().sum::<f64>()).abs();
    if gap > 1e-9 {
        return Err(Error::Unbalanced { gap });
    }
    let (cn, dn) = (params.c(), params.d());
    let a = &params.affinity;

    let r0 = min_cost_flow(a, b, nu);
    let face = optimal_face(a, &r0);
    let feasible = positive_cells(&face, &r0, b, nu);
    let gap_tol = (1e-14f64).max(2.0 * gap);
    let mass = sinkhorn_on_support(&feasible, b, nu, gap_tol).unwrap_or(r0);

    let mut plan = vec![vec![0.0; dn]; cn];
    for d in 0..dn {
        for c in 0..cn {
            plan[c][d] = if nu[d] > 0.0 { mass[c][d] / nu[d] } else { b[c] };
        }
    }
    let objective = (0..cn)
        .flat_map(|c| (0..dn).map(move |d| (c, d)))
        .map(|(c, d)| mass[c][d] * a[c][d])
        .sum::<f64>()
        / params.n();
    Ok(QPlan {
        plan,
        mass,
        objective,
    })
}

struct Arc {
    to: usize,
    cap: f64,
    cost: f64,
}

/// Maximum-profit transport masses by successive shortest paths with
/// Bellman-Ford (costs are `-a`, hence negative).
fn min_cost_flow(a: &[Vec<f64>], b: &[f64], nu: &[f64]) -> Vec<Vec<f64>> {
    let (cn, dn) = (b.len(), nu.len());
    let source = 0;
    let sink = cn + dn + 1;
    let nodes = sink + 1;
    let mut arcs: Vec<Arc> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let mut add = |arcs: &mut Vec<Arc>, u: usize, v: usize, cap: f64, cost: f64| {
        adj[u].push(arcs.len());
        arcs.push(Arc { to: v, cap, cost });
        adj[v].push(arcs.len());
        arcs.push(Arc {
            to: u,
            cap: 0.0,
            cost: -cost,
        });
    };
    for (c, &bc) in b.iter().enumerate() {
        if bc > 0.0 {
            add(&mut arcs, source, 1 + c, bc, 0.0);
        }
    }
    let mut cell_arc = vec![vec![usize::MAX; dn]; cn];
    for c in 0..cn {
        if b[c] <= 0.0 {
            continue;
        }
        for d in 0..dn {
            if nu[d] > 0.0 {
                cell_arc[c][d] = arcs.len();
                add(&mut arcs, 1 + c, 1 + cn + d, f64::INFINITY, -a[c][d]);
            }
        }
    }
    for (d, &v) in nu.iter().enumerate() {
        if v > 0.0 {
            add(&mut arcs, 1 + cn + d, sink, v, 0.0);
        }
    }

    loop {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut pred = vec![usize::MAX; nodes];
        let mut in_queue = vec![false; nodes];
        let mut queue = VecDeque::from([source]);
        dist[source] = 0.0;
        while let Some(u) = queue.pop_front() {
            in_queue[u] = false;
            for &e in &adj[u] {
                let arc = &arcs[e];
                if arc.cap > SUPPORT_EPS {
                    let nd = dist[u] + arc.cost;
                    if nd < dist[arc.to] - 1e-12 {
                        dist[arc.to] = nd;
                        pred[arc.to] = e;
                        if !in_queue[arc.to] {
                            in_queue[arc.to] = true;
                            queue.push_back(arc.to);
                        }
                    }
                }
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        let mut push = f64::INFINITY;
        let mut v = sink;
        while v != source {
            let e = pred[v];
            push = push.min(arcs[e].cap);
            v = arcs[e ^ 1].to;
        }
        if push <= SUPPORT_EPS {
            break;
        }
        let mut v = sink;
        while v != source {
            let e = pred[v];
            arcs[e].cap -= push;
            arcs[e ^ 1].cap += push;
            v = arcs[e ^ 1].to;
        }
    }

    let mut r = vec![vec![0.0; dn]; cn];
    for c in 0..cn {
        for d in 0..dn {
            let e = cell_arc[c][d];
            if e != usize::MAX {
                r[c][d] = arcs[e ^ 1].cap;
            }
        }
    }
    r
}

/// Cells with zero reduced cost under optimal duals recovered from the
/// residual graph of `r`.
fn optimal_face(a: &[Vec<f64>], r: &[Vec<f64>]) -> Vec<Vec<bool>> {
    let cn = a.len();
    let dn = if cn > 0 { a[0].len() } else { 0 };
    // Potentials: rows 0..cn, columns cn..cn+dn, all reachable from a
    // virtual root at distance zero.
    let mut dist = vec![0.0f64; cn + dn];
    for _ in 0..(cn + dn + 1) {
        let mut changed = false;
        for c in 0..cn {
            for d in 0..dn {
                let via_row = dist[c] - a[c][d];
                if via_row < dist[cn + d] - 1e-15 {
                    dist[cn + d] = via_row;
                    changed = true;
                }
                if r[c][d] > SUPPORT_EPS {
                    let via_col = dist[cn + d] + a[c][d];
                    if via_col < dist[c] - 1e-15 {
                        dist[c] = via_col;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let tol = 1e-9 * scale;
    (0..cn)
        .map(|c| {
            (0..dn)
                .map(|d| dist[c] - dist[cn + d] - a[c][d] <= tol)
                .collect()
        })
        .collect()
}

/// Face cells that carry positive mass in some optimal plan: either
/// already in the support of `r`, or closing an alternating cycle through
/// the support.
fn positive_cells(face: &[Vec<bool>], r: &[Vec<f64>], b: &[f64], nu: &[f64]) -> Vec<Vec<bool>> {
    let (cn, dn) = (b.len(), nu.len());
    let mut out = vec![vec![false; dn]; cn];
    for d in 0..dn {
        if nu[d] <= 0.0 {
            continue;
        }
        // BFS from column d: column -> row along support cells, row -> column
        // along face cells.
        let mut seen_row = vec![false; cn];
        let mut seen_col = vec![false; dn];
        seen_col[d] = true;
        let mut queue = VecDeque::from([d]);
        while let Some(j) = queue.pop_front() {
            for i in 0..cn {
                if !seen_row[i] && r[i][j] > SUPPORT_EPS {
                    seen_row[i] = true;
                    for (k, seen) in seen_col.iter_mut().enumerate() {
                        if !*seen && face[i][k] && nu[k] > 0.0 {
                            *seen = true;
                            queue.push_back(k);
                        }
                    }
                }
            }
        }
        for c in 0..cn {
            if b[c] > 0.0 && (r[c][d] > SUPPORT_EPS || (face[c][d] && seen_row[c])) {
                out[c][d] = true;
            }
        }
    }
    out
}

/// Maximum-entropy plan with the given marginals supported on `mask`.
fn sinkhorn_on_support(mask: &[Vec<bool>], b: &[f64], nu: &[f64], tol: f64) -> Option<Vec<Vec<f64>>> {
    let (cn, dn) = (b.len(), nu.len());
    let mut x = vec![1.0; cn];
    let mut y = vec![1.0; dn];
    for _ in 0..200_000 {
        for c in 0..cn {
            let s: f64 = (0..dn).filter(|&d| mask[c][d]).map(|d| y[d]).sum();
            x[c] = if s > 0.0 { b[c] / s } else { 0.0 };
        }
        for d in 0..dn {
            let s: f64 = (0..cn).filter(|&c| mask[c][d]).map(|c| x[c]).sum();
            y[d] = if s > 0.0 { nu[d] / s } else { 0.0 };
        }
        let err = (0..cn)
            .map(|c| {
                let row: f64 = (0..dn).filter(|&d| mask[c][d]).map(|d| x[c] * y[d]).sum();
                (row - b[c]).abs()
            })
            .fold(0.0, f64::max);
        if err <= tol {
            let r = (0..cn)
                .map(|c| {
                    (0..dn)
                        .map(|d| if mask[c][d] { x[c] * y[d] } else { 0.0 })
                        .collect()
                })
                .collect();
            return Some(r);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(a: Vec<Vec<f64>>, b: Vec<f64>, nu: Vec<f64>) -> ModelParams {
        ModelParams {
            num_offline_classes: b.len(),
            num_online_classes: nu.len(),
            offline_scale: 100,
            horizon_factor: 1.0,
            affinity_cap: a.iter().flatten().fold(0.0, |m: f64, &x| m.max(x)),
            affinity: a,
            budgets: b,
            arrival_law: nu,
        }
    }

    #[test]
    fn single_cell() {
        let q = solve_qstar(&params(vec![vec![1.0]], vec![1.0], vec![1.0])).unwrap();
        assert_abs_diff_eq!(q.plan[0][0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn diagonal_affinity_gives_identity() {
        let p = params(
            vec![vec![2.0, 0.0], vec![0.0, 2.0]],
            vec![0.5, 0.5],
            vec![0.5, 0.5],
        );
        let q = solve_qstar(&p).unwrap();
        assert_abs_diff_eq!(q.plan[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.plan[0][1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.plan[1][1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.objective, 0.02, epsilon = 1e-14);
    }

    #[test]
    fn constant_affinity_gives_independent_coupling() {
        let p = params(
            vec![vec![1.5; 3]; 2],
            vec![0.3, 0.7],
            vec![0.2, 0.5, 0.3],
        );
        let q = solve_qstar(&p).unwrap();
        for c in 0..2 {
            for d in 0..3 {
                assert_abs_diff_eq!(q.plan[c][d], p.budgets[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_mass_column_gets_canonical_fill() {
        let p = params(
            vec![vec![3.0, 1.0], vec![1.0, 2.0]],
            vec![0.4, 0.6],
            vec![1.0, 0.0],
        );
        let q = solve_qstar(&p).unwrap();
        assert_eq!(q.plan[0][1], 0.4);
        assert_eq!(q.plan[1][1], 0.6);
        assert!(q.marginal_error(&p) < 1e-12);
    }

    #[test]
    fn brute_force_vertices_two_by_two() {
        // A 2x2 transportation polytope is a segment parameterized by R[0][0].
        let p = params(
            vec![vec![3.0, 1.0], vec![2.0, 2.5]],
            vec![0.35, 0.65],
            vec![0.55, 0.45],
        );
        let q = solve_qstar(&p).unwrap();
        let lo = (p.budgets[0] - p.arrival_law[1]).max(0.0);
        let hi = p.budgets[0].min(p.arrival_law[0]);
        let value = |r00: f64| {
            let r01 = p.budgets[0] - r00;
            let r10 = p.arrival_law[0] - r00;
            let r11 = p.arrival_law[1] - r01;
            (3.0 * r00 + r01 + 2.0 * r10 + 2.5 * r11) / 100.0
        };
        let best = value(lo).max(value(hi));
        assert_abs_diff_eq!(q.objective, best, epsilon = 1e-14);
    }
}
