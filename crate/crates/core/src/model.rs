//! The sparse bipartite SBM instance and its sampling primitives.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the simplex constraints on `budgets` and `arrival_law`.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub num_offline_classes: usize,
    pub num_online_classes: usize,
    pub offline_scale: u64,
    pub horizon_factor: f64,
    /// Row-major `C x D` matrix; `affinity[c][d] / N` is the edge probability.
    pub affinity: Vec<Vec<f64>>,
    pub affinity_cap: f64,
    pub budgets: Vec<f64>,
    pub arrival_law: Vec<f64>,
}

/// How per-class offline capacities are realized from `budgets`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OfflineMode {
    /// Largest-remainder apportionment of `N * b`.
    #[default]
    Rounding,
    /// Multinomial draw of `N` nodes from `b`.
    Sampled,
}

impl ModelParams {
    pub fn c(&self) -> usize {
        self.num_offline_classes
    }

    pub fn d(&self) -> usize {
        self.num_online_classes
    }

    pub fn n(&self) -> f64 {
        self.offline_scale as f64
    }

    /// Number of arrivals, `round(alpha * N)` with halves rounded up.
    pub fn horizon(&self) -> u64 {
        (self.horizon_factor * self.n()).round() as u64
    }

    pub fn edge_probability(&self, c: usize, d: usize) -> f64 {
        self.affinity[c][d] / self.n()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d) = (self.num_offline_classes, self.num_online_classes);
        if c == 0 {
            return Err(Error::invalid("num_offline_classes", "must be positive"));
        }
        if d == 0 {
            return Err(Error::invalid("num_online_classes", "must be positive"));
        }
        if self.offline_scale == 0 {
            return Err(Error::invalid("offline_scale", "must be positive"));
        }
        if !(self.horizon_factor.is_finite() && self.horizon_factor > 0.0) {
            return Err(Error::invalid(
                "horizon_factor",
                format!("must be a positive real, got {}", self.horizon_factor),
            ));
        }
        let n = self.n();
        if !(self.affinity_cap.is_finite() && self.affinity_cap >= 0.0 && self.affinity_cap < n) {
            return Err(Error::invalid(
                "affinity_cap",
                format!("must lie in [0, N={n}), got {}", self.affinity_cap),
            ));
        }
        if self.affinity.len() != c {
            return Err(Error::invalid(
                "affinity",
                format!("expected {c} rows, got {}", self.affinity.len()),
            ));
        }
        for (i, row) in self.affinity.iter().enumerate() {
            if row.len() != d {
                return Err(Error::invalid(
                    "affinity",
                    format!("row {i} has {} entries, expected {d}", row.len()),
                ));
            }
            for (j, &a) in row.iter().enumerate() {
                if !(a.is_finite() && a >= 0.0) {
                    return Err(Error::invalid(
                        "affinity",
                        format!("entry ({i},{j}) = {a} is not a non-negative real"),
                    ));
                }
                if a > self.affinity_cap {
                    return Err(Error::invalid(
                        "affinity",
                        format!(
                            "affinity exceeds cap: entry ({i},{j}) = {a} > {}",
                            self.affinity_cap
                        ),
                    ));
                }
            }
        }
        check_simplex("budgets", &self.budgets, c)?;
        check_simplex("arrival_law", &self.arrival_law, d)?;
        Ok(())
    }

    /// Copy with `budgets` and `arrival_law` rescaled to sum to one.
    pub fn renormalized(&self) -> Self {
        let mut out = self.clone();
        normalize(&mut out.budgets);
        normalize(&mut out.arrival_law);
        out
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Same instance at a different offline scale. The cap is kept if still
    /// below the new `N`.
    pub fn with_scale(&self, n: u64) -> Self {
        let mut out = self.clone();
        out.offline_scale = n;
        out
    }

    /// Same instance with horizon factor chosen so that `round(alpha N) = t`.
    pub fn with_horizon(&self, t: u64) -> Self {
        let mut out = self.clone();
        out.horizon_factor = t as f64 / self.n();
        out
    }

    /// The default five-by-six instance used for the Figure-1 style runs:
    /// affinities uniform in `[0.5, 5]`, budgets and arrival law drawn from a
    /// flat Dirichlet, all from a ChaCha stream seeded with `seed`.
    pub fn figure1_default(seed: u64) -> Self {
        let (c, d) = (5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let affinity = (0..c)
            .map(|_| (0..d).map(|_| rng.random_range(0.5..=5.0)).collect())
            .collect();
        let budgets = flat_dirichlet(&mut rng, c);
        let arrival_law = flat_dirichlet(&mut rng, d);
        ModelParams {
            num_offline_classes: c,
            num_online_classes: d,
            offline_scale: 5000,
            horizon_factor: 10.0,
            affinity,
            affinity_cap: 5.0,
            budgets,
            arrival_law,
        }
    }
}

fn check_simplex(field: &'static str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::invalid(
            field,
            format!("expected {len} entries, got {}", v.len()),
        ));
    }
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::invalid(
            field,
            format!("entry {i} = {x} is not a non-negative real"),
        ));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        let what = if field == "budgets" {
            "budgets do not sum to 1"
        } else {
            "arrival law does not sum to 1"
        };
        return Err(Error::invalid(field, format!("{what} (sum = {s})")));
    }
    Ok(())
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

fn flat_dirichlet<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    normalize(&mut v);
    v
}

/// Per-class offline node counts summing to `N`.
pub fn realize_offline_counts<R: Rng + ?Sized>(
    params: &ModelParams,
    mode: OfflineMode,
    rng: &mut R,
) -> Vec<u64> {
    match mode {
        OfflineMode::Rounding => largest_remainder(params.offline_scale, &params.budgets),
        OfflineMode::Sampled => {
            let mut left = params.offline_scale;
            let mut mass_left = 1.0;
            let c = params.budgets.len();
            let mut out = vec![0u64; c];
            for (i, &b) in params.budgets.iter().enumerate() {
                if i + 1 == c || left == 0 {
                    out[i] = left;
                    left = 0;
                    continue;
                }
                let p = if mass_left > 0.0 {
                    (b / mass_left).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let k = Binomial::new(left, p).expect("probability in [0,1]").sample(rng);
                out[i] = k;
                left -= k;
                mass_left -= b;
            }
            out
        }
    }
}

/// Largest-remainder apportionment of `n` by weights `b`; equal remainders
/// go to the lower index.
pub fn largest_remainder(n: u64, b: &[f64]) -> Vec<u64> {
    let nf = n as f64;
    let mut out: Vec<u64> = b.iter().map(|&x| (nf * x).floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut left = n.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..b.len()).collect();
    let rem = |i: usize| nf * b[i] - (nf * b[i]).floor();
    order.sort_by(|&i, &j| rem(j).total_cmp(&rem(i)).then(i.cmp(&j)));
    for &i in order.iter().cycle().take(b.len().max(1) * 2) {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Sampler for arrival classes; zero-mass classes are never returned.
#[derive(Debug, Clone)]
pub struct ArrivalSampler {
    index: WeightedIndex<f64>,
}

impl ArrivalSampler {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let index = WeightedIndex::new(&params.arrival_law)
            .map_err(|e| Error::invalid("arrival_law", e.to_string()))?;
        Ok(ArrivalSampler { index })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }
}

/// One arrival class drawn from the arrival law.
pub fn sample_arrival_class<R: Rng + ?Sized>(params: &ModelParams, rng: &mut R) -> Result<usize> {
    Ok(ArrivalSampler::new(params)?.sample(rng))
}

/// `(1 - a/N)^free`, the probability that none of `free` nodes is adjacent.
#[inline]
pub fn no_edge_probability(a: f64, n: f64, free: u64) -> f64 {
    if free == 0 {
        return 1.0;
    }
    (free as f64 * (-a / n).ln_1p()).exp()
}
