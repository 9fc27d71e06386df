//! Class-selection rules: Myopic, Balance, RealBalance, LearnedBalance and
//! a uniform explorer.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{lower_bracket, neighborhood, CountsTable};
use crate::model::{no_edge_probability, ModelParams};
use crate::numerics::newton_bracketed;
use crate::transport::{solve_qstar, QPlan};

/// Scores within this distance of the maximum count as tied.
pub const TIE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    Class(usize),
    Abstain,
}

/// Serializable description of a policy, resolved into a [`Policy`] per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicySpec {
    Myopic,
    Balance,
    RealBalance,
    LearnedBalance {
        q: f64,
        delta: f64,
        #[serde(default)]
        explore_horizon: Option<u64>,
    },
    Uniform,
}

impl PolicySpec {
    pub fn tag(&self) -> &'static str {
        match self {
            PolicySpec::Myopic => "myopic",
            PolicySpec::Balance => "balance",
            PolicySpec::RealBalance => "real-balance",
            PolicySpec::LearnedBalance { .. } => "learned-balance",
            PolicySpec::Uniform => "uniform",
        }
    }

    pub fn learned(q: f64) -> Self {
        PolicySpec::LearnedBalance {
            q,
            delta: 0.05,
            explore_horizon: None,
        }
    }
}

/// `ceil(T^{(q+3)/4})`, capped at `T`.
pub fn explore_horizon(t: u64, q: f64) -> u64 {
    let e = (t as f64).powf((q + 3.0) / 4.0).ceil() as u64;
    e.min(t)
}

/// Everything a policy may look at when choosing.
#[derive(Debug, Clone, Copy)]
pub struct ChoiceContext<'a> {
    pub params: &'a ModelParams,
    pub caps: &'a [u64],
    pub matched: &'a [u64],
    /// Arrival class.
    pub d: usize,
    /// One-based arrival index.
    pub t: u64,
}

#[derive(Debug, Clone)]
pub enum Policy {
    Myopic(MyopicSampler),
    Balance,
    RealBalance,
    LearnedBalance(Box<LearnedBalance>),
    Uniform,
}

impl Policy {
    pub fn build(spec: &PolicySpec, params: &ModelParams, caps: &[u64]) -> Result<Self> {
        Ok(match spec {
            PolicySpec::Myopic => Policy::Myopic(MyopicSampler::new(&solve_qstar(params)?)?),
            PolicySpec::Balance => Policy::Balance,
            PolicySpec::RealBalance => Policy::RealBalance,
            PolicySpec::LearnedBalance {
                q,
                delta,
                explore_horizon: h,
            } => {
                if !(*q > 0.0 && *q < 1.0) {
                    return Err(Error::invalid("q", format!("must lie in (0, 1), got {q}")));
                }
                if !(*delta > 0.0 && *delta < 1.0) {
                    return Err(Error::invalid("delta", format!("must lie in (0, 1), got {delta}")));
                }
                let h = h.unwrap_or_else(|| explore_horizon(params.horizon(), *q));
                Policy::LearnedBalance(Box::new(LearnedBalance::new(
                    params,
                    caps,
                    CountsTable::new(caps, params.d()),
                    h,
                    *delta,
                )))
            }
            PolicySpec::Uniform => Policy::Uniform,
        })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Policy::Myopic(_) => "myopic",
            Policy::Balance => "balance",
            Policy::RealBalance => "real-balance",
            Policy::LearnedBalance(_) => "learned-balance",
            Policy::Uniform => "uniform",
        }
    }

    pub fn choose<R: Rng + ?Sized>(&mut self, ctx: &ChoiceContext, rng: &mut R) -> Choice {
        match self {
            Policy::Myopic(s) => Choice::Class(s.choose(ctx.d, rng).expect("arrival class has mass")),
            Policy::Balance => Choice::Class(balance_choose(ctx.params, ctx.matched, ctx.caps)),
            Policy::RealBalance => real_balance_choose(ctx.params, ctx.matched, ctx.caps),
            Policy::LearnedBalance(l) => Choice::Class(l.choose(ctx, rng)),
            Policy::Uniform => Choice::Class(rng.random_range(0..ctx.params.c())),
        }
    }

    /// Feedback for the pre-decision triple `(c, d, m)`.
    pub fn observe(&mut self, c: usize, d: usize, m: u64, matched: bool) {
        if let Policy::LearnedBalance(l) = self {
            l.observe(c, d, m, matched);
        }
    }

    pub fn counts(&self) -> Option<&CountsTable> {
        match self {
            Policy::LearnedBalance(l) => Some(&l.counts),
            _ => None,
        }
    }
}

/// Per-arrival-class samplers over `Q*(., d)`.
#[derive(Debug, Clone)]
pub struct MyopicSampler {
    columns: Vec<Option<WeightedIndex<f64>>>,
}

impl MyopicSampler {
    pub fn new(q: &QPlan) -> Result<Self> {
        let cn = q.plan.len();
        let dn = q.plan.first().map_or(0, Vec::len);
        let columns = (0..dn)
            .map(|d| {
                if q.mass.iter().all(|row| row[d] <= 0.0) {
                    return None;
                }
                WeightedIndex::new((0..cn).map(|c| q.plan[c][d].max(0.0))).ok()
            })
            .collect();
        Ok(MyopicSampler { columns })
    }

    pub fn choose<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Result<usize> {
        match self.columns.get(d) {
            Some(Some(w)) => Ok(w.sample(rng)),
            _ => Err(Error::invalid(
                "arrival class",
                format!("class {d} has zero arrival mass"),
            )),
        }
    }
}

/// Class `c_t` drawn with probability `Q*(c_t, d_t)` (the plan column is
/// already normalized by `nu(d_t)`).
pub fn myopic_choose<R: Rng + ?Sized>(q: &QPlan, d: usize, rng: &mut R) -> Result<usize> {
    MyopicSampler::new(q)?.choose(d, rng)
}

/// `sum_d (1 - (1 - a_{c,d}/N)^{cap - m}) nu(d)`.
pub fn balance_score(params: &ModelParams, m: u64, cap: u64, c: usize) -> f64 {
    let free = cap.saturating_sub(m);
    if free == 0 {
        return 0.0;
    }
    let n = params.n();
    params.affinity[c]
        .iter()
        .zip(&params.arrival_law)
        .map(|(&a, &nu)| (1.0 - no_edge_probability(a, n, free)) * nu)
        .sum()
}

/// Lowest index among the candidates whose score is within [`TIE_TOL`] of
/// the maximum.
pub fn argmax_lowest<I>(scores: I) -> Option<usize>
where
    I: IntoIterator<Item = (usize, f64)> + Clone,
{
    let best = scores
        .clone()
        .into_iter()
        .map(|(_, s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    scores
        .into_iter()
        .find(|&(_, s)| s >= best - TIE_TOL)
        .map(|(i, _)| i)
}

pub fn balance_choose(params: &ModelParams, matched: &[u64], caps: &[u64]) -> usize {
    let scores: Vec<(usize, f64)> = (0..params.c())
        .map(|c| (c, balance_score(params, matched[c], caps[c], c)))
        .collect();
    argmax_lowest(scores.iter().copied()).unwrap_or(0)
}

pub fn real_balance_choose(params: &ModelParams, matched: &[u64], caps: &[u64]) -> Choice {
    let scores: Vec<(usize, f64)> = (0..params.c())
        .filter(|&c| matched[c] < caps[c])
        .map(|c| (c, balance_score(params, matched[c], caps[c], c)))
        .collect();
    match argmax_lowest(scores.iter().copied()) {
        Some(c) => Choice::Class(c),
        None => Choice::Abstain,
    }
}

/// Explore-then-commit Balance with estimated failure probabilities.
///
/// Estimates are cached per `(c, d)` together with the `m` they were
/// computed at, and refreshed only when the class moved or new feedback
/// arrived for the pair.
#[derive(Debug, Clone)]
pub struct LearnedBalance {
    pub counts: CountsTable,
    pub explore_horizon: u64,
    pub delta: f64,
    nu: Vec<f64>,
    lower: Vec<f64>,
    cache: Vec<Option<(u64, f64)>>,
}

impl LearnedBalance {
    pub fn new(params: &ModelParams, caps: &[u64], counts: CountsTable, explore_horizon: u64, delta: f64) -> Self {
        LearnedBalance {
            counts,
            explore_horizon,
            delta,
            nu: params.arrival_law.clone(),
            lower: caps.iter().map(|&cap| lower_bracket(params, cap)).collect(),
            cache: vec![None; caps.len() * params.d()],
        }
    }

    fn choose<R: Rng + ?Sized>(&mut self, ctx: &ChoiceContext, rng: &mut R) -> usize {
        let cn = ctx.params.c();
        if ctx.t <= self.explore_horizon {
            return rng.random_range(0..cn);
        }
        let scores: Vec<(usize, f64)> = (0..cn)
            .map(|c| (c, self.score(c, ctx.matched[c])))
            .collect();
        argmax_lowest(scores.iter().copied()).unwrap_or(0)
    }

    /// `sum_d (1 - D̂_{c,d}(m)) nu(d)`, with `D̂ = 1` where there is no data.
    pub fn score(&mut self, c: usize, m: u64) -> f64 {
        let cap = self.counts.caps()[c];
        if m >= cap {
            return 0.0;
        }
        let dn = self.nu.len();
        let mut s = 0.0;
        for d in 0..dn {
            if self.nu[d] <= 0.0 {
                continue;
            }
            let dh = self.dhat_cached(c, d, m);
            s += (1.0 - dh) * self.nu[d];
        }
        s
    }

    fn dhat_cached(&mut self, c: usize, d: usize, m: u64) -> f64 {
        let k = c * self.nu.len() + d;
        if let Some((cm, v)) = self.cache[k] {
            if cm == m {
                return v;
            }
        }
        let v = self.estimate(c, d, m);
        self.cache[k] = Some((m, v));
        v
    }

    /// `g^{-1}(Theta(m))`, inlined over the neighbourhood to avoid
    /// intermediate allocation.
    fn estimate(&self, c: usize, d: usize, m: u64) -> f64 {
        let cap = self.counts.caps()[c];
        let v = match neighborhood(m, cap) {
            Ok(v) => v,
            Err(_) => return 1.0,
        };
        let free = (cap - m) as f64;
        let mut terms: Vec<(f64, f64)> = Vec::new();
        let (mut t, mut f) = (0.0, 0.0);
        for (mp, tm, fm) in self.counts.cells(c, d, v.lo, v.hi) {
            terms.push((tm as f64, (cap - mp) as f64 / free));
            t += tm as f64;
            f += fm;
        }
        if t == 0.0 {
            return 1.0;
        }
        let theta = f / t;
        let lower = self.lower[c];
        let g = |x: f64| {
            let lx = x.ln();
            let (mut g, mut dg) = (0.0, 0.0);
            for &(w, e) in &terms {
                let p = (e * lx).exp();
                g += w * p;
                dg += w * e * p / x;
            }
            (g / t - theta, dg / t)
        };
        if theta >= 1.0 {
            return 1.0;
        }
        if lower <= 0.0 || g(lower).0 >= 0.0 {
            return lower.max(0.0);
        }
        newton_bracketed(g, lower, 1.0, theta.clamp(lower, 1.0), 1e-16, 1e-15, 200).unwrap_or(theta)
    }

    fn observe(&mut self, c: usize, d: usize, m: u64, matched: bool) {
        self.counts.record(c, d, m, matched);
        self.cache[c * self.nu.len() + d] = None;
    }
}
