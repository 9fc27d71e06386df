//! Shared oracles and instance generators for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use sbm_matching::ModelParams;

/// Dense two-phase tableau simplex with Bland's rule:
/// minimize `c.x` subject to `A x = b`, `x >= 0`.
/// Returns the optimal value and a solution.
pub fn simplex_min(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Option<(f64, Vec<f64>)> {
    let m = a.len();
    let n = c.len();
    const EPS: f64 = 1e-12;
    // Columns: n originals, m artificials, then rhs.
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = sign * a[i][j];
        }
        t[i][n + i] = 1.0;
        t[i][width - 1] = sign * b[i];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], r: usize, col: usize) {
        let p = t[r][col];
        for v in t[r].iter_mut() {
            *v /= p;
        }
        let row = t[r].clone();
        for (i, line) in t.iter_mut().enumerate() {
            if i != r {
                let f = line[col];
                if f != 0.0 {
                    for (x, y) in line.iter_mut().zip(&row) {
                        *x -= f * y;
                    }
                }
            }
        }
        basis[r] = col;
    }

    fn optimize(t: &mut [Vec<f64>], basis: &mut [usize], allowed: usize) -> bool {
        let m = basis.len();
        let w = t[0].len();
        loop {
            // Objective row is the last row; reduced costs are its entries.
            let obj = &t[m];
            let Some(col) = (0..allowed).find(|&j| obj[j] < -1e-12) else {
                return true;
            };
            let mut best: Option<(f64, usize)> = None;
            for i in 0..m {
                if t[i][col] > 1e-12 {
                    let ratio = t[i][w - 1] / t[i][col];
                    match best {
                        None => best = Some((ratio, i)),
                        Some((r, bi)) => {
                            if ratio < r - 1e-15 || ((ratio - r).abs() <= 1e-15 && basis[i] < basis[bi]) {
                                best = Some((ratio, i));
                            }
                        }
                    }
                }
            }
            match best {
                None => return false,
                Some((_, r)) => pivot(t, basis, r, col),
            }
        }
    }

    // Phase one: minimize the sum of artificials.
    for j in 0..width {
        let s: f64 = (0..m).map(|i| t[i][j]).sum();
        t[m][j] = if (n..n + m).contains(&j) { 0.0 } else { -s };
    }
    optimize(&mut t, &mut basis, n + m);
    if -t[m][width - 1] > 1e-9 {
        return None;
    }
    // Drive artificials out of the basis.
    for r in 0..m {
        if basis[r] >= n {
            if let Some(col) = (0..n).find(|&j| t[r][j].abs() > EPS) {
                pivot(&mut t, &mut basis, r, col);
            }
        }
    }
    // Phase two objective.
    for j in 0..width {
        t[m][j] = if j < n { c[j] } else { 0.0 };
    }
    for r in 0..m {
        let bj = basis[r];
        if bj < n {
            let f = t[m][bj];
            if f != 0.0 {
                let row = t[r].clone();
                for (x, y) in t[m].iter_mut().zip(&row) {
                    *x -= f * y;
                }
            }
        }
    }
    if !optimize(&mut t, &mut basis, n) {
        return None;
    }
    let mut x = vec![0.0; n];
    for r in 0..m {
        if basis[r] < n {
            x[basis[r]] = t[r][width - 1];
        }
    }
    let value = c.iter().zip(&x).map(|(a, b)| a * b).sum();
    Some((value, x))
}

/// Optimal `sum R a / N` of the transport program via the dense simplex.
pub fn transport_lp_value(p: &ModelParams) -> f64 {
    let (cn, dn) = (p.c(), p.d());
    let nvar = cn * dn;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for c in 0..cn {
        let mut row = vec![0.0; nvar];
        for d in 0..dn {
            row[c * dn + d] = 1.0;
        }
        a.push(row);
        b.push(p.budgets[c]);
    }
    for d in 0..dn {
        let mut row = vec![0.0; nvar];
        for c in 0..cn {
            row[c * dn + d] = 1.0;
        }
        a.push(row);
        b.push(p.arrival_law[d]);
    }
    let cost: Vec<f64> = (0..nvar).map(|k| -p.affinity[k / dn][k % dn]).collect();
    let (v, _) = simplex_min(&cost, &a, &b).expect("transport LP is feasible and bounded");
    -v / p.n()
}

pub fn dirichlet(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Random instance with affinities uniform in `[lo, hi]`.
pub fn random_instance(seed: u64, cn: usize, dn: usize, lo: f64, hi: f64, n: u64, alpha: f64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let affinity = (0..cn)
        .map(|_| (0..dn).map(|_| rng.random_range(lo..=hi)).collect())
        .collect();
    ModelParams {
        num_offline_classes: cn,
        num_online_classes: dn,
        offline_scale: n,
        horizon_factor: alpha,
        affinity,
        affinity_cap: hi,
        budgets: dirichlet(&mut rng, cn),
        arrival_law: dirichlet(&mut rng, dn),
    }
}

pub fn instance(a: Vec<Vec<f64>>, b: Vec<f64>, nu: Vec<f64>, n: u64, alpha: f64) -> ModelParams {
    ModelParams {
        num_offline_classes: b.len(),
        num_online_classes: nu.len(),
        offline_scale: n,
        horizon_factor: alpha,
        affinity_cap: a.iter().flatten().fold(0.0, |m: f64, &x| m.max(x)),
        affinity: a,
        budgets: b,
        arrival_law: nu,
    }
}

#[test]
fn simplex_oracle_solves_textbook_problem() {
    // max 3x + 2y, x + y + s1 = 4, x + 3y + s2 = 6 -> optimum 12 at (4, 0).
    let (v, x) = simplex_min(
        &[-3.0, -2.0, 0.0, 0.0],
        &[vec![1.0, 1.0, 1.0, 0.0], vec![1.0, 3.0, 0.0, 1.0]],
        &[4.0, 6.0],
    )
    .unwrap();
    assert!((v + 12.0).abs() < 1e-12);
    assert!((x[0] - 4.0).abs() < 1e-12);
}
