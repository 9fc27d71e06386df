//! Multi-seed studies: fluid-limit convergence, backend equivalence,
//! estimator coverage, regret scaling and the Figure-1 reproduction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{average_trajectories, run, Backend, RunOptions, Trajectory, TrajectoryStats};
use crate::error::{Error, Result};
use crate::estimator::{dhat, CountsTable};
use crate::fluid_balance::{balance_deviation_bound, build_schedule, m_star_grid, PhaseSchedule};
use crate::fluid_myopic::{solve_ode, wormald_bound};
use crate::io::config_hash;
use crate::model::ModelParams;
use crate::numerics::{linear_fit, LinearFit};
use crate::policies::{explore_horizon, PolicySpec};
use crate::transport::solve_qstar;

/// Resolved inputs of a report and their content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config: serde_json::Value,
    pub config_hash: String,
}

impl ReportMeta {
    pub fn of<T: Serialize>(config: &T) -> Result<Self> {
        Ok(ReportMeta {
            config: serde_json::to_value(config)?,
            config_hash: config_hash(config)?,
        })
    }
}

/// Same instance at offline scale `n`, with the horizon factor snapped so
/// that `T / N` is exactly the fluid horizon.
pub fn rescale(template: &ModelParams, n: u64) -> ModelParams {
    let p = template.with_scale(n);
    let t = p.horizon();
    p.with_horizon(t)
}

/// Fluid limit of a policy evaluated at `times[i] / N`; `out[c][i]`.
pub fn fluid_limit(params: &ModelParams, spec: &PolicySpec, times: &[u64]) -> Result<Vec<Vec<f64>>> {
    let n = params.n();
    let alpha = params.horizon_factor;
    let grid: Vec<f64> = times.iter().map(|&t| (t as f64 / n).min(alpha)).collect();
    match spec {
        PolicySpec::Myopic => Ok(solve_ode(params, &solve_qstar(params)?, &grid)?.y),
        PolicySpec::Balance | PolicySpec::RealBalance | PolicySpec::LearnedBalance { .. } => {
            let s = build_schedule(params)?;
            m_star_grid(params, &s, &grid)
        }
        PolicySpec::Uniform => Err(Error::Usage("no fluid limit for the uniform policy".into())),
    }
}

/// `sup_i |x[i][c] / N - limit[c][i]|` per class.
pub fn sup_deviation(counts: &[Vec<f64>], limit: &[Vec<f64>], n: f64) -> Vec<f64> {
    let cn = limit.len();
    (0..cn)
        .map(|c| {
            counts
                .iter()
                .zip(&limit[c])
                .map(|(row, l)| (row[c] / n - l).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

pub fn run_seeds(params: &ModelParams, spec: &PolicySpec, seeds: &[u64], opts: &RunOptions) -> Result<Vec<Trajectory>> {
    seeds.par_iter().map(|&s| run(params, spec, s, opts)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLevel {
    pub n: u64,
    /// `per_seed[s][c]`: sup-deviation of seed `s`, class `c`.
    pub per_seed: Vec<Vec<f64>>,
    /// Largest per-seed deviation over classes and seeds.
    pub max_deviation: f64,
    /// Sup-deviation of the mean trajectory, maximized over classes.
    pub mean_deviation: f64,
    /// Theoretical per-class bound in fluid units.
    pub bound: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub meta: ReportMeta,
    pub policy: String,
    pub seeds: Vec<u64>,
    pub levels: Vec<ConvergenceLevel>,
    /// Least-squares slope of log(mean over seeds of max-class deviation)
    /// against log N.
    pub fit: LinearFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub template: ModelParams,
    pub policy: PolicySpec,
    pub n_list: Vec<u64>,
    pub seeds: Vec<u64>,
    /// Exponent `q` in `epsilon = N^{-(1-q)/2}` for the Balance bound.
    pub q: f64,
    pub backend: Backend,
}

pub fn convergence_study(cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    if cfg.n_list.len() < 2 || cfg.n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("n_list", "needs at least two increasing values"));
    }
    let mut levels = Vec::new();
    for &n in &cfg.n_list {
        let params = rescale(&cfg.template, n);
        params.validate()?;
        let opts = RunOptions {
            backend: cfg.backend,
            ..Default::default()
        };
        let trs = run_seeds(&params, &cfg.policy, &cfg.seeds, &opts)?;
        let limit = fluid_limit(&params, &cfg.policy, &trs[0].times)?;
        let nf = params.n();
        let per_seed: Vec<Vec<f64>> = trs
            .iter()
            .map(|tr| {
                let counts: Vec<Vec<f64>> = tr
                    .counts
                    .iter()
                    .map(|r| r.iter().map(|&x| x as f64).collect())
                    .collect();
                sup_deviation(&counts, &limit, nf)
            })
            .collect();
        let stats = average_trajectories(&trs)?;
        let mean_deviation = sup_deviation(&stats.mean, &limit, nf)
            .into_iter()
            .fold(0.0, f64::max);
        let max_deviation = per_seed.iter().flatten().cloned().fold(0.0, f64::max);
        let bound = match cfg.policy {
            PolicySpec::Myopic => {
                let q = solve_qstar(&params)?;
                let (l, _) = crate::fluid_myopic::rates(&params, &q);
                l.iter()
                    .map(|&lc| wormald_bound(lc, params.horizon_factor, nf, params.c()).deviation)
                    .collect()
            }
            _ => {
                let eps = nf.powf(-(1.0 - cfg.q) / 2.0);
                balance_deviation_bound(&params, nf, eps)?.bound
            }
        };
        levels.push(ConvergenceLevel {
            n,
            per_seed,
            max_deviation,
            mean_deviation,
            bound,
        });
    }
    let xs: Vec<f64> = levels.iter().map(|l| (l.n as f64).ln()).collect();
    let ys: Vec<f64> = levels
        .iter()
        .map(|l| {
            let m = l
                .per_seed
                .iter()
                .map(|s| s.iter().cloned().fold(0.0, f64::max))
                .sum::<f64>()
                / l.per_seed.len() as f64;
            m.max(f64::MIN_POSITIVE).ln()
        })
        .collect();
    Ok(ConvergenceReport {
        meta: ReportMeta::of(cfg)?,
        policy: cfg.policy.tag().to_string(),
        seeds: cfg.seeds.clone(),
        levels,
        fit: linear_fit(&xs, &ys)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    pub t: u64,
    pub n: u64,
    pub q: f64,
    pub explore_horizon: u64,
    /// `R(T)` per seed, Balance total minus LearnedBalance total.
    pub regret: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Whether every seed pair consumed the same arrival sequence.
    pub paired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub meta: ReportMeta,
    pub records: Vec<RegretRecord>,
    pub fit: LinearFit,
    /// Number of means clipped to 1 before taking logarithms.
    pub clipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretConfig {
    pub template: ModelParams,
    pub q: f64,
    pub t_list: Vec<u64>,
    pub seeds: Vec<u64>,
    /// Horizon factor; each `T` runs at `N = round(T / alpha)`.
    pub alpha: f64,
}

pub fn regret_experiment(cfg: &RegretConfig) -> Result<RegretReport> {
    if !(cfg.q > 0.0 && cfg.q < 1.0) {
        return Err(Error::invalid("q", "must lie in (0, 1)"));
    }
    if cfg.t_list.len() < 2 {
        return Err(Error::invalid("t_list", "needs at least two horizons"));
    }
    let mut records = Vec::new();
    for &t in &cfg.t_list {
        let n = ((t as f64 / cfg.alpha).round() as u64).max(1);
        let params = cfg.template.with_scale(n).with_horizon(t);
        params.validate()?;
        let learned = PolicySpec::learned(cfg.q);
        let opts = RunOptions::default();
        let pairs: Vec<(Trajectory, Trajectory)> = cfg
            .seeds
            .par_iter()
            .map(|&s| Ok((run(&params, &PolicySpec::Balance, s, &opts)?, run(&params, &learned, s, &opts)?)))
            .collect::<Result<_>>()?;
        let regret: Vec<f64> = pairs
            .iter()
            .map(|(b, l)| b.total_matched() as f64 - l.total_matched() as f64)
            .collect();
        let k = regret.len() as f64;
        let mean = regret.iter().sum::<f64>() / k;
        let std = (regret.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k).sqrt();
        records.push(RegretRecord {
            t,
            n,
            q: cfg.q,
            explore_horizon: explore_horizon(t, cfg.q),
            regret,
            mean,
            std,
            paired: pairs.iter().all(|(b, l)| b.arrival_hash == l.arrival_hash),
        });
    }
    let clipped = records.iter().filter(|r| r.mean < 1.0).count();
    let xs: Vec<f64> = records.iter().map(|r| (r.t as f64).ln()).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.mean.max(1.0).ln()).collect();
    Ok(RegretReport {
        meta: ReportMeta::of(cfg)?,
        records,
        fit: linear_fit(&xs, &ys)?,
        clipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendReport {
    pub policy: String,
    /// Total-variation distance of the final count of each class.
    pub tv: Vec<f64>,
    pub max_tv: f64,
}

/// Total-variation distance between two empirical distributions of
/// non-negative integers.
pub fn tv_distance(x: &[u64], y: &[u64]) -> f64 {
    let hi = x.iter().chain(y).copied().max().unwrap_or(0) as usize;
    let mut hx = vec![0.0; hi + 1];
    let mut hy = vec![0.0; hi + 1];
    for &v in x {
        hx[v as usize] += 1.0 / x.len() as f64;
    }
    for &v in y {
        hy[v as usize] += 1.0 / y.len() as f64;
    }
    0.5 * hx.iter().zip(&hy).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Runs `seeds` under both backends and compares the per-class laws of
/// the final counts. The graph backend uses seeds offset by `seeds.len()`
/// so the two samples are independent.
pub fn backend_equivalence(params: &ModelParams, spec: &PolicySpec, seeds: &[u64]) -> Result<BackendReport> {
    let mk = |backend| RunOptions {
        backend,
        sample_stride: Some(params.horizon().max(1)),
        ..Default::default()
    };
    let offset = seeds.len() as u64;
    let counts = run_seeds(params, spec, seeds, &mk(Backend::Counts))?;
    let graph_seeds: Vec<u64> = seeds.iter().map(|s| s + offset).collect();
    let graph = run_seeds(params, spec, &graph_seeds, &mk(Backend::Graph))?;
    let tv: Vec<f64> = (0..params.c())
        .map(|c| {
            let x: Vec<u64> = counts.iter().map(|t| t.final_counts()[c]).collect();
            let y: Vec<u64> = graph.iter().map(|t| t.final_counts()[c]).collect();
            tv_distance(&x, &y)
        })
        .collect();
    Ok(BackendReport {
        policy: spec.tag().to_string(),
        max_tv: tv.iter().cloned().fold(0.0, f64::max),
        tv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub t_total: u64,
    pub trials: usize,
    pub covered: usize,
    pub coverage: f64,
    pub radius: f64,
    pub max_abs_error: f64,
}

/// Synthetic Bernoulli feeds for one `(c, d)` pair: `t_total` samples at
/// states drawn uniformly from `V_m`, each failing with the exact
/// `D(m')`. Measures how often `|D̂(m) - D(m)| <= radius`.
pub fn estimator_coverage(
    params: &ModelParams,
    cap: u64,
    m: u64,
    t_total: u64,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<CoverageReport> {
    let v = crate::estimator::neighborhood(m, cap)?;
    let truth = crate::estimator::d_exact(params, cap, 0, 0, m);
    let results: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut counts = CountsTable::new(&[cap], 1);
            for _ in 0..t_total {
                let mp = rng.random_range(v.lo..=v.hi);
                let fail = rng.random::<f64>() < crate::estimator::d_exact(params, cap, 0, 0, mp);
                counts.record(0, 0, mp, !fail);
            }
            let r = dhat(&counts, params, 0, 0, m, delta)?;
            Ok(((r.dhat - truth).abs(), r.radius))
        })
        .collect::<Result<_>>()?;
    let radius = results.first().map_or(0.0, |r| r.1);
    let covered = results.iter().filter(|(e, r)| e <= r).count();
    Ok(CoverageReport {
        t_total,
        trials,
        covered,
        coverage: covered as f64 / trials as f64,
        radius,
        max_abs_error: results.iter().map(|r| r.0).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure1Config {
    pub params: ModelParams,
    pub seeds: Vec<u64>,
    pub q: f64,
    /// Seed of the default instance, when `params` was generated.
    pub instance_seed: Option<u64>,
}

impl Figure1Config {
    pub fn default_with(instance_seed: u64, seeds: usize) -> Self {
        Figure1Config {
            params: ModelParams::figure1_default(instance_seed),
            seeds: (0..seeds as u64).collect(),
            q: 0.5,
            instance_seed: Some(instance_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRuns {
    pub policy: String,
    pub stats: TrajectoryStats,
    pub totals: Vec<u64>,
    pub mean_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure1Output {
    pub meta: ReportMeta,
    pub runs: Vec<PolicyRuns>,
    /// Common sample times (arrival index).
    pub times: Vec<u64>,
    /// `m*` at `times / N`, `[class][i]`.
    pub m_star: Vec<Vec<f64>>,
    /// Myopic ODE at `times / N`, `[class][i]`.
    pub ode: Vec<Vec<f64>>,
    pub schedule: PhaseSchedule,
}

impl Figure1Output {
    pub fn policy(&self, tag: &str) -> Option<&PolicyRuns> {
        self.runs.iter().find(|r| r.policy == tag)
    }

    /// Sup-norm gap, in fluid units, between a policy's mean trajectory
    /// and `m*`.
    pub fn gap_to_m_star(&self, tag: &str, n: f64) -> Option<f64> {
        let r = self.policy(tag)?;
        Some(
            sup_deviation(&r.stats.mean, &self.m_star, n)
                .into_iter()
                .fold(0.0, f64::max),
        )
    }
}

pub fn figure1_repro(cfg: &Figure1Config) -> Result<Figure1Output> {
    let params = rescale(&cfg.params, cfg.params.offline_scale);
    params.validate()?;
    let specs = [
        PolicySpec::Myopic,
        PolicySpec::Balance,
        PolicySpec::RealBalance,
        PolicySpec::learned(cfg.q),
    ];
    let opts = RunOptions::default();
    let mut runs = Vec::new();
    let mut times = Vec::new();
    for spec in &specs {
        let trs = run_seeds(&params, spec, &cfg.seeds, &opts)?;
        let stats = average_trajectories(&trs)?;
        times = stats.times.clone();
        let totals: Vec<u64> = trs.iter().map(Trajectory::total_matched).collect();
        runs.push(PolicyRuns {
            policy: spec.tag().to_string(),
            mean_total: totals.iter().sum::<u64>() as f64 / totals.len().max(1) as f64,
            totals,
            stats,
        });
    }
    Ok(Figure1Output {
        meta: ReportMeta::of(cfg)?,
        m_star: fluid_limit(&params, &PolicySpec::Balance, &times)?,
        ode: fluid_limit(&params, &PolicySpec::Myopic, &times)?,
        schedule: build_schedule(&params)?,
        runs,
        times,
    })
}
