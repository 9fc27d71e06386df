//! Scalar numerical kernels: bracketed root finding, fixed-step RK4,
//! adaptive Simpson quadrature and least-squares line fits.

use crate::error::{Error, Result};

/// Root of a monotone function on `[lo, hi]` by bisection.
///
/// `f(lo)` and `f(hi)` must not share a strict sign.
pub fn bisect<F>(f: F, mut lo: f64, mut hi: f64, xtol: f64, max_iter: usize) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::numerical(format!(
            "bisect: no sign change on [{lo}, {hi}]"
        )));
    }
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= xtol || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Safeguarded Newton iteration: Newton steps that leave the current
/// bracket are replaced by bisection.
///
/// `f` returns the value and derivative. Stops when `|f| <= ftol` or the
/// bracket shrinks below `xtol`.
pub fn newton_bracketed<F>(
    f: F,
    mut lo: f64,
    mut hi: f64,
    x0: f64,
    ftol: f64,
    xtol: f64,
    max_iter: usize,
) -> Result<f64>
where
    F: Fn(f64) -> (f64, f64),
{
    let (flo, _) = f(lo);
    let (fhi, _) = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::numerical(format!(
            "newton: no sign change on [{lo}, {hi}]"
        )));
    }
    let lo_sign = flo.signum();
    let mut x = x0.clamp(lo, hi);
    for _ in 0..max_iter {
        let (fx, dfx) = f(x);
        if fx.abs() <= ftol {
            return Ok(x);
        }
        if fx.signum() == lo_sign {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= xtol {
            return Ok(x);
        }
        let newton = x - fx / dfx;
        x = if dfx != 0.0 && newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(x)
}

/// One classical RK4 step for a scalar autonomous or time-dependent ODE.
#[inline]
pub fn rk4_step<F>(f: &F, t: f64, y: f64, h: f64) -> f64
where
    F: Fn(f64, f64) -> f64,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, y + 0.5 * h * k1);
    let k3 = f(t + 0.5 * h, y + 0.5 * h * k2);
    let k4 = f(t + h, y + h * k3);
    y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Integrates `y' = f(t, y)` from `t0` to `t1` with uniform steps no larger
/// than `max_step`.
pub fn rk4_integrate<F>(f: &F, t0: f64, y0: f64, t1: f64, max_step: f64) -> f64
where
    F: Fn(f64, f64) -> f64,
{
    let span = t1 - t0;
    if span <= 0.0 {
        return y0;
    }
    let n = (span / max_step).ceil().max(1.0) as usize;
    let h = span / n as f64;
    let mut y = y0;
    for i in 0..n {
        y = rk4_step(f, t0 + i as f64 * h, y, h);
    }
    y
}

/// Solution of `y' = f(t, y)`, `y(grid[0]) = y0`, sampled at every grid
/// point. The grid must be non-decreasing.
pub fn rk4_on_grid<F>(f: &F, y0: f64, grid: &[f64], max_step: f64) -> Vec<f64>
where
    F: Fn(f64, f64) -> f64,
{
    let mut out = Vec::with_capacity(grid.len());
    let mut y = y0;
    for (i, &t) in grid.iter().enumerate() {
        if i > 0 {
            y = rk4_integrate(f, grid[i - 1], y, t, max_step);
        }
        out.push(y);
    }
    out
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn adaptive_simpson<F>(f: &F, a: f64, b: f64, tol: f64, max_depth: u32) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a)?;
    let fb = f(b)?;
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        if !delta.is_finite() {
            return Err(Error::numerical("adaptive Simpson: non-finite integrand"));
        }
        return Ok(left + right + delta / 15.0);
    }
    Ok(simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Residual sum of squares.
    pub rss: f64,
}

/// Ordinary least-squares fit of `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::numerical("linear fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::numerical("linear fit with constant abscissae"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - slope * x - intercept;
            r * r
        })
        .sum();
    Ok(LinearFit {
        slope,
        intercept,
        rss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bisect_finds_sqrt_two() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-14, 200).unwrap();
        assert_abs_diff_eq!(r, 2f64.sqrt(), epsilon = 1e-13);
    }

    #[test]
    fn bisect_rejects_missing_sign_change() {
        assert!(bisect(|x| x * x + 1.0, -1.0, 1.0, 1e-12, 100).is_err());
    }

    #[test]
    fn newton_matches_bisection() {
        let f = |x: f64| (x.exp() - 3.0, x.exp());
        let r = newton_bracketed(f, 0.0, 5.0, 0.0, 1e-15, 1e-15, 100).unwrap();
        assert_abs_diff_eq!(r, 3f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn newton_survives_flat_derivative() {
        let f = |x: f64| (x.powi(3), 3.0 * x * x);
        let r = newton_bracketed(f, -1.0, 2.0, 0.0, 1e-30, 1e-14, 500).unwrap();
        assert!(r.abs() < 1e-9);
    }

    #[test]
    fn rk4_exponential_growth() {
        let y = rk4_integrate(&|_t, y| y, 0.0, 1.0, 1.0, 1e-3);
        assert_abs_diff_eq!(y, std::f64::consts::E, epsilon = 1e-12);
    }

    #[test]
    fn rk4_on_grid_hits_grid_points() {
        let grid = [0.0, 0.5, 1.0, 1.0, 2.0];
        let ys = rk4_on_grid(&|t, _y| 2.0 * t, 0.0, &grid, 1e-2);
        for (t, y) in grid.iter().zip(ys) {
            assert_abs_diff_eq!(y, t * t, epsilon = 1e-12);
        }
    }

    #[test]
    fn simpson_integrates_smooth_function() {
        let v = adaptive_simpson(&|x: f64| Ok(x.sin()), 0.0, std::f64::consts::PI, 1e-12, 50)
            .unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-11);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.75 * x - 2.0).collect();
        let fit = linear_fit(&xs, &ys).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.75, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.intercept, -2.0, epsilon = 1e-14);
        assert!(fit.rss < 1e-25);
    }
}
