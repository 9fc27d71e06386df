//! Failure-probability estimator `D̂_{c,d}(m)` with neighbourhood pooling
//! and a Hoeffding confidence radius.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::newton_bracketed;

/// One bandit observation: the pre-decision triple and the match indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub c: usize,
    pub d: usize,
    pub m: u64,
    pub y: bool,
}

/// Observation counts `T_{c,d,m}` and failure sums `F_{c,d,m}`.
///
/// Failure sums are stored as reals so that oracle tables with very large
/// synthetic weights stay exact in ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsTable {
    caps: Vec<u64>,
    num_online: usize,
    obs: Vec<Vec<u64>>,
    fail: Vec<Vec<f64>>,
    total: u64,
}

impl CountsTable {
    pub fn new(caps: &[u64], num_online: usize) -> Self {
        let mut obs = Vec::with_capacity(caps.len() * num_online);
        let mut fail = Vec::with_capacity(caps.len() * num_online);
        for &cap in caps {
            for _ in 0..num_online {
                obs.push(vec![0; cap as usize]);
                fail.push(vec![0.0; cap as usize]);
            }
        }
        CountsTable {
            caps: caps.to_vec(),
            num_online,
            obs,
            fail,
            total: 0,
        }
    }

    /// A table whose every cell holds `weight` observations with failure
    /// frequency equal to the exact `D_{c,d}(m)`.
    pub fn oracle(params: &ModelParams, caps: &[u64], weight: u64) -> Self {
        let mut t = Self::new(caps, params.d());
        for (c, &cap) in caps.iter().enumerate() {
            for d in 0..params.d() {
                let k = t.idx(c, d);
                for m in 0..cap {
                    t.obs[k][m as usize] = weight;
                    t.fail[k][m as usize] = weight as f64 * d_exact(params, cap, c, d, m);
                }
            }
        }
        t.total = weight
            .saturating_mul(caps.iter().sum::<u64>())
            .saturating_mul(params.d() as u64);
        t
    }

    pub fn from_feedback(caps: &[u64], num_online: usize, log: &[Feedback]) -> Result<Self> {
        let mut t = Self::new(caps, num_online);
        for f in log {
            if f.c >= caps.len() || f.d >= num_online || f.m >= caps[f.c] {
                return Err(Error::invalid(
                    "feedback",
                    format!("record ({}, {}, {}) outside the table", f.c, f.d, f.m),
                ));
            }
            t.record(f.c, f.d, f.m, f.y);
        }
        Ok(t)
    }

    #[inline]
    fn idx(&self, c: usize, d: usize) -> usize {
        c * self.num_online + d
    }

    pub fn caps(&self) -> &[u64] {
        &self.caps
    }

    pub fn num_online(&self) -> usize {
        self.num_online
    }

    /// Records one observation at `m < cap_c`; observations at full classes
    /// carry no information and are ignored.
    #[inline]
    pub fn record(&mut self, c: usize, d: usize, m: u64, matched: bool) {
        if m >= self.caps[c] {
            return;
        }
        let k = self.idx(c, d);
        self.obs[k][m as usize] += 1;
        if !matched {
            self.fail[k][m as usize] += 1.0;
        }
        self.total += 1;
    }

    pub fn observations(&self, c: usize, d: usize, m: u64) -> u64 {
        self.obs[self.idx(c, d)][m as usize]
    }

    pub fn failures(&self, c: usize, d: usize, m: u64) -> f64 {
        self.fail[self.idx(c, d)][m as usize]
    }

    pub fn total_observations(&self) -> u64 {
        self.total
    }

    /// Non-empty cells `(m', T, F)` of `(c, d)` inside `[lo, hi]`.
    pub fn cells(&self, c: usize, d: usize, lo: u64, hi: u64) -> impl Iterator<Item = (u64, u64, f64)> + '_ {
        let k = self.idx(c, d);
        let obs = &self.obs[k];
        let fail = &self.fail[k];
        (lo..=hi)
            .filter(move |&m| obs[m as usize] > 0)
            .map(move |m| (m, obs[m as usize], fail[m as usize]))
    }
}

/// Inclusive integer interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: u64,
    pub hi: u64,
}

/// `V_m = {m' in [0, cap) : (cap - m') / (cap - m) in [1/2, 2]}`.
pub fn neighborhood(m: u64, cap: u64) -> Result<Interval> {
    if m >= cap {
        return Err(Error::Domain {
            what: "neighborhood",
            value: m as f64,
            lo: 0.0,
            hi: cap.saturating_sub(1) as f64,
        });
    }
    let free = cap - m;
    let lo = (2 * m).saturating_sub(cap);
    let hi = cap - free.div_ceil(2);
    Ok(Interval { lo, hi })
}

/// Pooled failure frequency over `V_m` and the pooled observation count.
pub fn theta(counts: &CountsTable, c: usize, d: usize, m: u64) -> Result<(f64, u64)> {
    let v = neighborhood(m, counts.caps[c])?;
    let (mut t, mut f) = (0u64, 0.0);
    for (_, tm, fm) in counts.cells(c, d, v.lo, v.hi) {
        t += tm;
        f += fm;
    }
    if t == 0 {
        return Err(Error::NoData { m: m as usize });
    }
    Ok((f / t as f64, t))
}

/// `g(x) = (1/T) sum_m' T_m' x^{e_m'}` on `[lower, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GFunction {
    /// `(weight, exponent)` pairs; weights need not be normalized.
    pub terms: Vec<(f64, f64)>,
    pub lower: f64,
    total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GInverse {
    pub x: f64,
    pub clamped: bool,
}

impl GFunction {
    pub fn new(terms: Vec<(f64, f64)>, lower: f64) -> Result<Self> {
        let total: f64 = terms.iter().map(|t| t.0).sum();
        if terms.is_empty() || total <= 0.0 {
            return Err(Error::numerical("g with no positive weight"));
        }
        if !(0.0..=1.0).contains(&lower) {
            return Err(Error::Domain {
                what: "g lower bracket",
                value: lower,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(GFunction {
            terms,
            lower,
            total,
        })
    }

    /// Weights for estimating at `m` from counts of `(c, d)` over `V_m`.
    pub fn from_counts(counts: &CountsTable, params: &ModelParams, c: usize, d: usize, m: u64) -> Result<Self> {
        let cap = counts.caps[c];
        let v = neighborhood(m, cap)?;
        let free = (cap - m) as f64;
        let terms: Vec<(f64, f64)> = counts
            .cells(c, d, v.lo, v.hi)
            .map(|(mp, t, _)| (t as f64, (cap - mp) as f64 / free))
            .collect();
        if terms.is_empty() {
            return Err(Error::NoData { m: m as usize });
        }
        Self::new(terms, lower_bracket(params, cap))
    }

    fn raw(&self, x: f64) -> (f64, f64) {
        if x <= 0.0 {
            return (0.0, 0.0);
        }
        let lx = x.ln();
        let (mut g, mut dg) = (0.0, 0.0);
        for &(w, e) in &self.terms {
            let p = (e * lx).exp();
            g += w * p;
            dg += w * e * p / x;
        }
        (g / self.total, dg / self.total)
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(x >= self.lower - 1e-15 && x <= 1.0 + 1e-15) {
            return Err(Error::Domain {
                what: "g",
                value: x,
                lo: self.lower,
                hi: 1.0,
            });
        }
        Ok(self.raw(x).0)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.raw(x).1
    }

    /// Unique `x` in `[lower, 1]` with `g(x) = y`; out-of-range `y` is
    /// clamped to the nearest end of the bracket.
    pub fn invert(&self, y: f64) -> GInverse {
        let g_lo = self.raw(self.lower).0;
        if y >= 1.0 {
            return GInverse {
                x: 1.0,
                clamped: y > 1.0,
            };
        }
        if y <= g_lo {
            return GInverse {
                x: self.lower,
                clamped: y < g_lo,
            };
        }
        let f = |x: f64| {
            let (g, dg) = self.raw(x);
            (g - y, dg)
        };
        let x = newton_bracketed(f, self.lower, 1.0, y.clamp(self.lower, 1.0), 1e-16, 1e-15, 200)
            .unwrap_or(y);
        GInverse { x, clamped: false }
    }
}

/// `(1 - a_max/N)^cap`, the smallest possible failure probability.
pub fn lower_bracket(params: &ModelParams, cap: u64) -> f64 {
    crate::model::no_edge_probability(params.affinity_cap, params.n(), cap)
}

/// `2 e^{a_max} sqrt(ln(2/delta) / (2 T))`.
pub fn confidence_radius(a_max: f64, delta: f64, t_total: u64) -> f64 {
    2.0 * a_max.exp() * ((2.0 / delta).ln() / (2.0 * t_total as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub dhat: f64,
    pub t_total: u64,
    pub radius: f64,
    pub neighborhood: Interval,
    pub clamped: bool,
}

pub fn dhat(
    counts: &CountsTable,
    params: &ModelParams,
    c: usize,
    d: usize,
    m: u64,
    delta: f64,
) -> Result<EstimateReport> {
    let (th, t_total) = theta(counts, c, d, m)?;
    let g = GFunction::from_counts(counts, params, c, d, m)?;
    let inv = g.invert(th);
    Ok(EstimateReport {
        dhat: inv.x,
        t_total,
        radius: confidence_radius(params.affinity_cap, delta, t_total),
        neighborhood: neighborhood(m, counts.caps[c])?,
        clamped: inv.clamped,
    })
}

/// `(1 - a_{c,d}/N)^{cap - m}`, the exact failure probability.
pub fn d_exact(params: &ModelParams, cap: u64, c: usize, d: usize, m: u64) -> f64 {
    crate::model::no_edge_probability(params.affinity[c][d], params.n(), cap.saturating_sub(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn neighborhood_examples() {
        assert_eq!(neighborhood(60, 100).unwrap(), Interval { lo: 20, hi: 80 });
        assert_eq!(neighborhood(0, 100).unwrap(), Interval { lo: 0, hi: 50 });
        assert_eq!(neighborhood(99, 100).unwrap(), Interval { lo: 98, hi: 99 });
        assert!(neighborhood(100, 100).is_err());
    }

    #[test]
    fn neighborhood_matches_ratio_definition() {
        for cap in 1..40u64 {
            for m in 0..cap {
                let v = neighborhood(m, cap).unwrap();
                for mp in 0..cap {
                    let r = (cap - mp) as f64 / (cap - m) as f64;
                    let inside = (0.5..=2.0).contains(&r);
                    assert_eq!(inside, (v.lo..=v.hi).contains(&mp), "cap={cap} m={m} m'={mp}");
                }
            }
        }
    }

    #[test]
    fn theta_pools_cells() {
        let mut t = CountsTable::new(&[10], 1);
        for i in 0..4 {
            t.record(0, 0, 2, i < 2);
        }
        for i in 0..6 {
            t.record(0, 0, 3, i < 3);
        }
        let (th, n) = theta(&t, 0, 0, 2).unwrap();
        assert_eq!(n, 10);
        assert_abs_diff_eq!(th, 0.5);
        assert!(matches!(theta(&t, 0, 0, 9), Err(Error::NoData { .. })));
    }

    #[test]
    fn g_examples() {
        let g = GFunction::new(vec![(1.0, 2.0)], 0.0).unwrap();
        assert_abs_diff_eq!(g.eval(0.5).unwrap(), 0.25);
        assert_abs_diff_eq!(g.invert(0.25).x, 0.5, epsilon = 1e-14);
        assert!(g.eval(1.5).is_err());
        let id = GFunction::new(vec![(3.0, 1.0), (2.0, 1.0)], 0.1).unwrap();
        assert_abs_diff_eq!(id.invert(0.37).x, 0.37, epsilon = 1e-15);
        let c = id.invert(0.01);
        assert!(c.clamped && c.x == 0.1);
    }

    #[test]
    fn radius_example() {
        let r = confidence_radius(1.0, 0.05, 1000);
        assert_abs_diff_eq!(r, 2.0 * 1f64.exp() * (40f64.ln() / 2000.0).sqrt(), epsilon = 1e-15);
        assert!((r - 0.2335).abs() < 1e-4);
    }

    #[test]
    fn d_exact_example() {
        let p = ModelParams {
            num_offline_classes: 1,
            num_online_classes: 1,
            offline_scale: 100,
            horizon_factor: 1.0,
            affinity: vec![vec![1.0]],
            affinity_cap: 1.0,
            budgets: vec![1.0],
            arrival_law: vec![1.0],
        };
        assert_abs_diff_eq!(d_exact(&p, 100, 0, 0, 50), 0.605006, epsilon = 1e-6);
        assert_eq!(d_exact(&p, 100, 0, 0, 100), 1.0);
    }
}
