//! Fluid limit of the Myopic policy: the per-class ODE, its closed-form
//! surrogate with error envelope, the deviation bound and the constant-row
//! (Erdős–Rényi) closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::rk4_on_grid;
use crate::transport::QPlan;

/// Default RK4 step in fluid time.
pub const ODE_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MyopicFluid {
    pub grid: Vec<f64>,
    /// `y[c][i]` at `grid[i]`.
    pub y: Vec<Vec<f64>>,
    pub y_tilde: Vec<Vec<f64>>,
    pub err_env: Vec<Vec<f64>>,
    pub l: Vec<f64>,
    pub j: Vec<f64>,
}

/// `L_c = sum_d a_{c,d} R(c,d)` and `J_c = (b_c^2/2) sum_d a_{c,d}^2 R(c,d)`.
pub fn rates(params: &ModelParams, q: &QPlan) -> (Vec<f64>, Vec<f64>) {
    (0..params.c())
        .map(|c| {
            let (mut l, mut j) = (0.0, 0.0);
            for d in 0..params.d() {
                let a = params.affinity[c][d];
                l += a * q.mass[c][d];
                j += a * a * q.mass[c][d];
            }
            let b = params.budgets[c];
            (l, 0.5 * b * b * j)
        })
        .unzip()
}

/// Evenly spaced grid of `points` times on `[0, alpha]`.
pub fn uniform_grid(alpha: f64, points: usize) -> Vec<f64> {
    let n = points.max(2) - 1;
    (0..=n)
        .map(|i| if i == n { alpha } else { alpha * i as f64 / n as f64 })
        .collect()
}

pub fn solve_ode(params: &ModelParams, q: &QPlan, grid: &[f64]) -> Result<MyopicFluid> {
    solve_ode_with_step(params, q, grid, ODE_STEP)
}

pub fn solve_ode_with_step(params: &ModelParams, q: &QPlan, grid: &[f64], max_step: f64) -> Result<MyopicFluid> {
    if grid.first().copied() != Some(0.0) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("grid", "must start at 0 and be non-decreasing"));
    }
    let (l, j) = rates(params, q);
    let mut y = Vec::with_capacity(params.c());
    let mut y_tilde = Vec::with_capacity(params.c());
    let mut err_env = Vec::with_capacity(params.c());
    for c in 0..params.c() {
        let b = params.budgets[c];
        let terms: Vec<(f64, f64)> = (0..params.d())
            .map(|d| (params.affinity[c][d], q.mass[c][d]))
            .filter(|&(a, r)| a > 0.0 && r > 0.0)
            .collect();
        let drift = |_t: f64, yc: f64| -> f64 {
            terms
                .iter()
                .map(|&(a, r)| (1.0 - (-a * (b - yc)).exp()) * r)
                .sum()
        };
        y.push(rk4_on_grid(&drift, 0.0, grid, max_step));
        let (yt, env): (Vec<f64>, Vec<f64>) = grid
            .iter()
            .map(|&t| surrogate_class(b, l[c], j[c], t))
            .unzip();
        y_tilde.push(yt);
        err_env.push(env);
    }
    Ok(MyopicFluid {
        grid: grid.to_vec(),
        y,
        y_tilde,
        err_env,
        l,
        j,
    })
}

/// Largest change of the ODE solution when the step is halved.
pub fn refinement_error(params: &ModelParams, q: &QPlan, grid: &[f64], max_step: f64) -> Result<f64> {
    let coarse = solve_ode_with_step(params, q, grid, max_step)?;
    let fine = solve_ode_with_step(params, q, grid, 0.5 * max_step)?;
    Ok(coarse
        .y
        .iter()
        .flatten()
        .zip(fine.y.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

fn surrogate_class(b: f64, l: f64, j: f64, t: f64) -> (f64, f64) {
    if l <= 0.0 {
        return (0.0, 0.0);
    }
    let decay = (-l * t).exp();
    (b * (1.0 - decay), j / l * (1.0 - decay))
}

/// `(y_tilde_c(t), envelope_c(t))` for every class.
pub fn surrogate(params: &ModelParams, q: &QPlan, t: f64) -> Vec<(f64, f64)> {
    let (l, j) = rates(params, q);
    (0..params.c())
        .map(|c| surrogate_class(params.budgets[c], l[c], j[c], t))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WormaldBound {
    pub deviation: f64,
    pub failure_prob: f64,
}

/// `3 L e^{alpha L} / N^{1/3}` with failure probability
/// `2 C exp(-N^{1/3} L^2 / (8 alpha))`.
pub fn wormald_bound(l: f64, alpha: f64, n: f64, num_classes: usize) -> WormaldBound {
    let n3 = n.cbrt();
    WormaldBound {
        deviation: 3.0 * l * (alpha * l).exp() / n3,
        failure_prob: 2.0 * num_classes as f64 * (-n3 * l * l / (8.0 * alpha)).exp(),
    }
}

/// Solution of `y' = (1 - e^{-a(b - y)}) S`, `y(0) = 0`:
/// `y(t) = -(1/a) ln(e^{-ab} + (1 - e^{-ab}) e^{-aSt})`.
pub fn er_closed_form(a: f64, b: f64, s: f64, t: f64) -> f64 {
    let eab = (-a * b).exp();
    -((eab + (1.0 - eab) * (-a * s * t).exp()).ln()) / a
}

/// The expression displayed for `z_c = y_c - b_c` in the constant-row
/// reduction, transcribed as printed:
/// `-(1/a) ln(1 + (e^{-ab} - 1) e^{-aSt})`.
///
/// It evaluates to `+b` at `t = 0` where `z(0) = -b` is required.
pub fn er_displayed_form(a: f64, b: f64, s: f64, t: f64) -> f64 {
    -((1.0 + ((-a * b).exp() - 1.0) * (-a * s * t).exp()).ln()) / a
}
