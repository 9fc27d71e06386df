//! Explicit solution of the Balance differential inclusion.
//!
//! With `phi_c(w) = sum_d nu(d) (1 - e^{-a_{c,d} w})` the map
//! `f_{c,beta}(z) = phi_c(beta - z)`, so every inverse reduces to inverting
//! the concave increasing `phi_c`, which Newton's method does monotonically
//! from `w = 0`.
//!
//! Inside phase `k` the active classes share a common probability `p`; each
//! keeps slack `w_c` with `phi_c(w_c) = p`, so
//! `w_c' = -p / (phi_c'(w_c) * sum_j 1 / phi_j'(w_j))`, whose total
//! `sum_c (beta_c - w_c)` is the phase-local `mu`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{adaptive_simpson, newton_bracketed};

/// RK4 step for `mu` in fluid time.
pub const MU_STEP: f64 = 1e-3;
const QUAD_TOL: f64 = 1e-10;

fn phi(params: &ModelParams, c: usize, w: f64) -> (f64, f64) {
    let (mut v, mut dv) = (0.0, 0.0);
    for (&a, &nu) in params.affinity[c].iter().zip(&params.arrival_law) {
        if a > 0.0 && nu > 0.0 {
            let e = (-a * w).exp();
            v += nu * (1.0 - e);
            dv += nu * a * e;
        }
    }
    (v, dv)
}

/// `sup_z f_{c,beta}(z) = sum_{d : a_{c,d} > 0} nu(d)`.
pub fn f_sup(params: &ModelParams, c: usize) -> f64 {
    params.affinity[c]
        .iter()
        .zip(&params.arrival_law)
        .filter(|(&a, _)| a > 0.0)
        .map(|(_, &nu)| nu)
        .sum()
}

/// `f_{c,beta}(z) = sum_d (1 - e^{-a_{c,d}(beta - z)}) nu(d)`.
pub fn f_eval(params: &ModelParams, c: usize, beta: f64, z: f64) -> f64 {
    params.affinity[c]
        .iter()
        .zip(&params.arrival_law)
        .map(|(&a, &nu)| (1.0 - (-a * (beta - z)).exp()) * nu)
        .sum()
}

/// Slack `w >= 0` with `phi_c(w) = p`.
fn phi_inverse(params: &ModelParams, c: usize, p: f64) -> Result<f64> {
    let sup = f_sup(params, c);
    if !(p >= 0.0 && p < sup) {
        return Err(Error::Domain {
            what: "f_inverse",
            value: p,
            lo: 0.0,
            hi: sup,
        });
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let mut w = 0.0;
    for _ in 0..500 {
        let (v, dv) = phi(params, c, w);
        let r = p - v;
        if r <= 1e-16 * sup || dv <= 0.0 {
            return Ok(w);
        }
        let next = w + r / dv;
        if !next.is_finite() || next <= w {
            return Ok(w);
        }
        w = next;
    }
    Ok(w)
}

/// The unique `z` with `f_{c,beta}(z) = p`, for `0 <= p < sup f`.
pub fn f_inverse(params: &ModelParams, c: usize, beta: f64, p: f64) -> Result<f64> {
    Ok(beta - phi_inverse(params, c, p)?)
}

/// `F_{k,beta}(z)`: the `p` solving `sum_{c in active} f^{-1}_{c,beta_c}(p) = z`.
///
/// `beta` is indexed by original class.
pub fn big_f_eval(params: &ModelParams, active: &[usize], beta: &[f64], z: f64) -> Result<f64> {
    if active.is_empty() {
        return Err(Error::invalid("active", "at least one class"));
    }
    let total: f64 = active.iter().map(|&c| beta[c]).sum();
    let w_target = total - z;
    if w_target < 0.0 {
        return Err(Error::Domain {
            what: "F",
            value: z,
            lo: f64::NEG_INFINITY,
            hi: total,
        });
    }
    if w_target == 0.0 {
        return Ok(0.0);
    }
    let k = active.len() as f64;
    let sup = active
        .iter()
        .map(|&c| f_sup(params, c))
        .fold(f64::INFINITY, f64::min);
    if sup <= 0.0 {
        return Err(Error::numerical("F with a class of zero affinity"));
    }
    let lo = active
        .iter()
        .map(|&c| phi(params, c, w_target / k).0)
        .fold(f64::INFINITY, f64::min);
    let hi = active
        .iter()
        .map(|&c| phi(params, c, w_target).0)
        .fold(f64::INFINITY, f64::min);
    let h = |p: f64| -> (f64, f64) {
        let (mut s, mut ds) = (0.0, 0.0);
        for &c in active {
            let w = phi_inverse(params, c, p.min(sup * (1.0 - 1e-16))).unwrap_or(f64::INFINITY);
            s += w;
            ds += 1.0 / phi(params, c, w).1;
        }
        (s - w_target, ds)
    };
    if hi <= lo || h(lo).0 >= 0.0 {
        return Ok(lo);
    }
    if h(hi).0 <= 0.0 {
        return Ok(hi);
    }
    let tol = 1e-15 * w_target.max(1.0);
    newton_bracketed(h, lo, hi, 0.5 * (lo + hi), tol, 1e-16, 200)
}

/// `sum_{c in active} f^{-1}_{c,beta_c}(p)`, the inverse of `F` computed
/// directly.
pub fn big_f_inverse(params: &ModelParams, active: &[usize], beta: &[f64], p: f64) -> Result<f64> {
    active
        .iter()
        .map(|&c| f_inverse(params, c, beta[c], p))
        .sum()
}

/// `mu^{-1}(z) = int_0^z du / F(u)` by adaptive Simpson.
pub fn mu_inverse_time(params: &ModelParams, active: &[usize], beta: &[f64], z: f64) -> Result<f64> {
    if z < 0.0 {
        return Err(Error::Domain {
            what: "mu_inverse_time",
            value: z,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    let total: f64 = active.iter().map(|&c| beta[c]).sum();
    if z >= total {
        return Err(Error::HorizonExceeded {
            phase: active.len(),
            detail: format!("F vanishes at z = {total} <= {z}"),
        });
    }
    let integrand = |u: f64| -> Result<f64> {
        let p = big_f_eval(params, active, beta, u)?;
        if p <= 0.0 {
            return Err(Error::HorizonExceeded {
                phase: active.len(),
                detail: format!("F({u}) = {p}"),
            });
        }
        Ok(1.0 / p)
    };
    adaptive_simpson(&integrand, 0.0, z, QUAD_TOL, 40)
}

/// Phase-local slacks `w` of the active classes, advanced by `tau` with
/// fixed RK4 steps no larger than `MU_STEP`.
fn advance_slacks(params: &ModelParams, active: &[usize], w: &mut [f64], tau: f64) {
    if tau <= 0.0 {
        return;
    }
    let n = (tau / MU_STEP).ceil().max(1.0) as usize;
    let h = tau / n as f64;
    let k = active.len();
    let drift = |w: &[f64], out: &mut [f64]| {
        let mut inv_sum = 0.0;
        let mut p = 0.0;
        for (i, &c) in active.iter().enumerate() {
            let (v, dv) = phi(params, c, w[i].max(0.0));
            out[i] = dv;
            inv_sum += 1.0 / dv;
            p += v;
        }
        p /= k as f64;
        for d in out.iter_mut() {
            *d = -p / (*d * inv_sum);
        }
    };
    let mut k1 = vec![0.0; k];
    let mut k2 = vec![0.0; k];
    let mut k3 = vec![0.0; k];
    let mut k4 = vec![0.0; k];
    let mut tmp = vec![0.0; k];
    for _ in 0..n {
        drift(w, &mut k1);
        for i in 0..k {
            tmp[i] = w[i] + 0.5 * h * k1[i];
        }
        drift(&tmp, &mut k2);
        for i in 0..k {
            tmp[i] = w[i] + 0.5 * h * k2[i];
        }
        drift(&tmp, &mut k3);
        for i in 0..k {
            tmp[i] = w[i] + h * k3[i];
        }
        drift(&tmp, &mut k4);
        for i in 0..k {
            w[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// `mu_{k,beta}(t)`, the solution of `mu' = F(mu)`, `mu(0) = 0`.
///
/// The active classes must start equalized, `f_{c,beta_c}(0)` equal for
/// all of them, as they do at every phase start.
pub fn mu_eval(params: &ModelParams, active: &[usize], beta: &[f64], t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::Domain {
            what: "mu_eval",
            value: t,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let mut w: Vec<f64> = active.iter().map(|&c| beta[c]).collect();
    advance_slacks(params, active, &mut w, t);
    Ok(active.iter().zip(&w).map(|(&c, wc)| beta[c] - wc).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    /// `order[s]` is the original index of the class in sorted position `s`.
    pub order: Vec<usize>,
    /// `beta[k][s]`: free budget of sorted class `s` at the start of phase
    /// `k` (zero-based).
    pub beta: Vec<Vec<f64>>,
    /// Phase start times clamped at `alpha`; `t[C] = alpha`.
    pub t: Vec<f64>,
    /// Unclamped start times; infinite for phases that never begin.
    pub raw_t: Vec<f64>,
    /// `levels[k] = f_{k, b_k}(0)` in sorted order.
    pub levels: Vec<f64>,
    pub alpha: f64,
}

impl PhaseSchedule {
    /// Phase budgets in original class coordinates.
    pub fn beta_original(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.order.len()];
        for (s, &c) in self.order.iter().enumerate() {
            out[c] = self.beta[k][s];
        }
        out
    }

    /// `k_t = max{k : t >= t_k}`, zero-based.
    pub fn phase_at(&self, t: f64) -> usize {
        let c = self.order.len();
        (0..c).rev().find(|&k| t >= self.raw_t[k]).unwrap_or(0)
    }

    pub fn active(&self, k: usize) -> &[usize] {
        &self.order[..=k]
    }
}

pub fn build_schedule(params: &ModelParams) -> Result<PhaseSchedule> {
    let cn = params.c();
    let alpha = params.horizon_factor;
    let init: Vec<f64> = (0..cn)
        .map(|c| f_eval(params, c, params.budgets[c], 0.0))
        .collect();
    let mut order: Vec<usize> = (0..cn).collect();
    order.sort_by(|&i, &j| init[j].total_cmp(&init[i]).then(i.cmp(&j)));
    let levels: Vec<f64> = order.iter().map(|&c| init[c]).collect();

    let mut beta = vec![order.iter().map(|&c| params.budgets[c]).collect::<Vec<f64>>()];
    let mut raw_t: Vec<f64> = vec![0.0];
    for k in 1..cn {
        let level = levels[k];
        let prev = beta[k - 1].clone();
        let mut next = prev.clone();
        let mut phase_mass = 0.0;
        for s in 0..k {
            let z = if level > 0.0 {
                f_inverse(params, order[s], prev[s], level).map_err(|e| Error::HorizonExceeded {
                    phase: k + 1,
                    detail: e.to_string(),
                })?
                .max(0.0)
            } else {
                prev[s]
            };
            next[s] = prev[s] - z;
            phase_mass += z;
        }
        let start = raw_t[k - 1];
        let t = if level <= 0.0 || !start.is_finite() {
            f64::INFINITY
        } else {
            let mut prev_orig = vec![0.0; cn];
            for (s, &c) in order.iter().enumerate() {
                prev_orig[c] = prev[s];
            }
            let dur = mu_inverse_time(params, &order[..k], &prev_orig, phase_mass).map_err(|e| match e {
                Error::HorizonExceeded { detail, .. } => Error::HorizonExceeded { phase: k + 1, detail },
                other => other,
            })?;
            start + dur
        };
        raw_t.push(t);
        beta.push(next);
    }
    if cn > 0 && levels[0] <= 0.0 {
        // Nothing can ever be matched.
        raw_t[0] = 0.0;
    }
    let mut t: Vec<f64> = raw_t.iter().map(|&x| x.min(alpha)).collect();
    t.push(alpha);
    Ok(PhaseSchedule {
        order,
        beta,
        t,
        raw_t,
        levels,
        alpha,
    })
}

/// Matched fractions in sorted coordinates from the phase-local `mu`.
fn m_from_mu(params: &ModelParams, schedule: &PhaseSchedule, k: usize, mu: f64) -> Result<Vec<f64>> {
    let cn = params.c();
    let beta_orig = schedule.beta_original(k);
    let active = schedule.active(k);
    let p = if mu <= 0.0 {
        schedule.levels[k]
    } else {
        big_f_eval(params, active, &beta_orig, mu)?
    };
    let mut out = vec![0.0; cn];
    for (s, &c) in schedule.order.iter().enumerate() {
        let b = params.budgets[c];
        let bs = schedule.beta[k][s];
        let z = if p >= f_sup(params, c) {
            0.0
        } else {
            f_inverse(params, c, bs, p)?.max(0.0)
        };
        out[c] = (b - bs) + if s <= k { z } else { 0.0 };
    }
    Ok(out)
}

/// `m*(t)` in original class coordinates, for `0 <= t <= alpha`.
pub fn m_star(params: &ModelParams, schedule: &PhaseSchedule, t: f64) -> Result<Vec<f64>> {
    if !(0.0..=schedule.alpha).contains(&t) {
        return Err(Error::Domain {
            what: "m_star",
            value: t,
            lo: 0.0,
            hi: schedule.alpha,
        });
    }
    if schedule.levels.first().is_none_or(|&l| l <= 0.0) {
        return Ok(vec![0.0; params.c()]);
    }
    let k = schedule.phase_at(t);
    let mu = mu_eval(params, schedule.active(k), &schedule.beta_original(k), t - schedule.raw_t[k])?;
    m_from_mu(params, schedule, k, mu)
}

/// `m*` on a non-decreasing grid, integrating each phase once.
/// Returns `m[c][i]` at `grid[i]`.
pub fn m_star_grid(params: &ModelParams, schedule: &PhaseSchedule, grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    let cn = params.c();
    let mut out = vec![Vec::with_capacity(grid.len()); cn];
    if schedule.levels.first().is_none_or(|&l| l <= 0.0) {
        for row in &mut out {
            row.resize(grid.len(), 0.0);
        }
        return Ok(out);
    }
    let mut phase = usize::MAX;
    let mut w: Vec<f64> = Vec::new();
    let mut tau = 0.0;
    for &t in grid {
        if !(0.0..=schedule.alpha).contains(&t) {
            return Err(Error::Domain {
                what: "m_star",
                value: t,
                lo: 0.0,
                hi: schedule.alpha,
            });
        }
        let k = schedule.phase_at(t);
        let active = schedule.active(k);
        let beta_orig = schedule.beta_original(k);
        if k != phase {
            phase = k;
            w = active.iter().map(|&c| beta_orig[c]).collect();
            tau = 0.0;
        }
        let target = t - schedule.raw_t[k];
        if target < tau {
            return Err(Error::invalid("grid", "must be non-decreasing"));
        }
        advance_slacks(params, active, &mut w, target - tau);
        tau = target;
        let mu: f64 = active.iter().zip(&w).map(|(&c, wc)| beta_orig[c] - wc).sum();
        let m = m_from_mu(params, schedule, k, mu)?;
        for c in 0..cn {
            out[c].push(m[c]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceBoundInputs {
    pub l: f64,
    pub delta: Vec<f64>,
    pub epsilon: f64,
    pub c_growth: f64,
    pub k_alpha: f64,
    pub u: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub b_mart: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceBound {
    pub inputs: BalanceBoundInputs,
    /// Per-class deviation bound in fluid units.
    pub bound: Vec<f64>,
    /// Lower bound on the probability that all deviations hold.
    pub probability: f64,
}

/// Constants and deviation bound of the Balance concentration result at
/// offline scale `n`.
pub fn balance_deviation_bound(params: &ModelParams, n: f64, epsilon: f64) -> Result<BalanceBound> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    let alpha = params.horizon_factor;
    let nu = &params.arrival_law;
    let l = (0..params.c())
        .map(|c| params.affinity[c].iter().zip(nu).map(|(a, v)| a * v).sum::<f64>())
        .fold(0.0, f64::max);
    let c_growth = (0..params.c())
        .map(|c| {
            let amin = params.affinity[c].iter().cloned().fold(f64::INFINITY, f64::min);
            let ac = (-amin / n).ln_1p();
            let e = (ac * n * params.budgets[c]).exp();
            (1.0 - e).abs().max((ac * e).abs())
        })
        .fold(0.0, f64::max);
    let k_alpha = if c_growth > 0.0 {
        (c_growth * alpha + epsilon) * (c_growth * alpha).exp() / c_growth
    } else {
        f64::INFINITY
    };
    let b_mart = 1.0;
    let mut inputs = BalanceBoundInputs {
        l,
        delta: vec![],
        epsilon,
        c_growth,
        k_alpha,
        u: vec![],
        a: vec![],
        b: vec![],
        c: vec![],
        b_mart,
    };
    let prefactor = alpha.min((l * alpha).exp() / (2.0 * l).sqrt());
    let mut bound = Vec::with_capacity(params.c());
    for c in 0..params.c() {
        let row = &params.affinity[c];
        let delta: f64 = row.iter().zip(nu).map(|(a, v)| a / std::f64::consts::E * v).sum::<f64>() / n;
        let u: f64 = row
            .iter()
            .zip(nu)
            .map(|(a, v)| (1.0 - (-a * params.budgets[c]).exp()) * v)
            .sum();
        let ca = u * (u * u + 14.0 * u / 3.0 + 2.0 * k_alpha);
        let cb = 2.0 * u * u + 4.0 * l * delta + 12.0 * k_alpha;
        let cc = 2.0 * u * u + 4.0 * l * epsilon + 8.0 * k_alpha;
        bound.push(prefactor * (ca / n + delta * cb + epsilon * cc).sqrt());
        inputs.delta.push(delta);
        inputs.u.push(u);
        inputs.a.push(ca);
        inputs.b.push(cb);
        inputs.c.push(cc);
    }
    Ok(BalanceBound {
        inputs,
        bound,
        probability: 1.0 - b_mart * alpha / (n * epsilon * epsilon),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single() -> ModelParams {
        ModelParams {
            num_offline_classes: 1,
            num_online_classes: 1,
            offline_scale: 1000,
            horizon_factor: 2.0,
            affinity: vec![vec![1.0]],
            affinity_cap: 1.0,
            budgets: vec![1.0],
            arrival_law: vec![1.0],
        }
    }

    fn twins() -> ModelParams {
        ModelParams {
            num_offline_classes: 2,
            num_online_classes: 1,
            offline_scale: 1000,
            horizon_factor: 2.0,
            affinity: vec![vec![1.5], vec![1.5]],
            affinity_cap: 1.5,
            budgets: vec![0.5, 0.5],
            arrival_law: vec![1.0],
        }
    }

    #[test]
    fn f_examples() {
        let p = single();
        assert_eq!(f_eval(&p, 0, 0.7, 0.7), 0.0);
        assert_abs_diff_eq!(f_eval(&p, 0, 1.0, 0.0), 1.0 - (-1f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(f_eval(&p, 0, 1.0, -60.0), 1.0, epsilon = 1e-15);
        assert_eq!(f_inverse(&p, 0, 1.0, 0.0).unwrap(), 1.0);
        assert_abs_diff_eq!(f_inverse(&p, 0, 1.0, 1.0 - (-1f64).exp()).unwrap(), 0.0, epsilon = 1e-12);
        assert!(f_inverse(&p, 0, 1.0, 1.0).is_err());
        assert!(f_inverse(&p, 0, 1.0, -0.1).is_err());
    }

    #[test]
    fn big_f_single_class_is_f() {
        let p = single();
        for &z in &[0.0, 0.2, 0.5, 0.9] {
            let v = big_f_eval(&p, &[0], &[1.0], z).unwrap();
            assert_abs_diff_eq!(v, f_eval(&p, 0, 1.0, z), epsilon = 1e-12);
        }
    }

    #[test]
    fn big_f_twins_split_evenly() {
        let p = twins();
        for &z in &[0.0, 0.3, 0.7] {
            let v = big_f_eval(&p, &[0, 1], &[0.5, 0.5], z).unwrap();
            assert_abs_diff_eq!(v, f_eval(&p, 0, 0.5, z / 2.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn mu_inverse_closed_form() {
        let p = single();
        for &z in &[0.1, 0.5, 0.9] {
            let t = mu_inverse_time(&p, &[0], &[1.0], z).unwrap();
            let e = std::f64::consts::E;
            let exact = (e - 1.0).ln() - ((1.0 - z).exp() - 1.0).ln();
            assert_abs_diff_eq!(t, exact, epsilon = 1e-9);
        }
    }

    #[test]
    fn mu_round_trip() {
        let p = twins();
        for &t in &[0.0, 0.4, 1.3] {
            let mu = mu_eval(&p, &[0, 1], &[0.5, 0.5], t).unwrap();
            let back = mu_inverse_time(&p, &[0, 1], &[0.5, 0.5], mu).unwrap();
            assert_abs_diff_eq!(back, t, epsilon = 1e-7);
        }
    }

    #[test]
    fn schedule_examples() {
        let s = build_schedule(&single()).unwrap();
        assert_eq!(s.t, vec![0.0, 2.0]);
        let s = build_schedule(&twins()).unwrap();
        assert_eq!(s.t[1], 0.0);
        assert_eq!(s.phase_at(0.0), 1);
    }

    #[test]
    fn m_star_single_class_solves_scalar_ode() {
        let p = single();
        let s = build_schedule(&p).unwrap();
        assert_eq!(m_star(&p, &s, 0.0).unwrap(), vec![0.0]);
        let m = m_star(&p, &s, 1.5).unwrap()[0];
        let e = std::f64::consts::E;
        // Inverting ln(e-1) - ln(e^{1-z} - 1) = t.
        let exact = 1.0 - ((e - 1.0) * (-1.5f64).exp() + 1.0).ln();
        assert_abs_diff_eq!(m, exact, epsilon = 1e-9);
        let g = m_star_grid(&p, &s, &[0.0, 0.75, 1.5]).unwrap();
        assert_abs_diff_eq!(g[0][2], m, epsilon = 1e-12);
    }

    #[test]
    fn deviation_bound_shrinks_with_n() {
        let p = twins();
        let eps = |n: f64| n.powf(-0.25);
        let b1 = balance_deviation_bound(&p, 1e4, eps(1e4)).unwrap();
        let b2 = balance_deviation_bound(&p, 1e8, eps(1e8)).unwrap();
        assert!(b2.bound[0] < b1.bound[0]);
        assert!(b1.inputs.u.iter().all(|&u| u <= 1.0));
    }
}
