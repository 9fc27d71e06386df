//! The online arrival process.
//!
//! Every seed owns a set of ChaCha streams, one per source of randomness,
//! so that two policies run with the same seed see the same arrival
//! sequence and the same per-step match uniforms:
//!
//! | stream | use |
//! |-------:|-----|
//! | 0 | arrival classes, one draw per step |
//! | 1 | match uniform, one draw per step (drawn even on abstain) |
//! | 2 | policy randomness (Myopic, exploration, uniform) |
//! | 3 | edge indicators of the graph backend |
//! | 4 | offline class counts in `sampled` mode |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::Feedback;
use crate::model::{no_edge_probability, realize_offline_counts, ArrivalSampler, ModelParams, OfflineMode};
use crate::policies::{Choice, ChoiceContext, Policy, PolicySpec};

pub const STREAM_ARRIVALS: u64 = 0;
pub const STREAM_MATCH: u64 = 1;
pub const STREAM_POLICY: u64 = 2;
pub const STREAM_EDGES: u64 = 3;
pub const STREAM_OFFLINE: u64 = 4;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Match iff at least one of the `free` nodes is adjacent, drawn in one
    /// uniform.
    #[default]
    Counts,
    /// Explicit per-node edge indicators and a uniformly chosen neighbour.
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOutcome {
    /// `None` when the policy abstained.
    pub chosen: Option<usize>,
    pub arrival: usize,
    pub matched: bool,
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub time: u64,
    pub matched: Vec<u64>,
    pub capacity: Vec<u64>,
    pub feedback_log: Option<Vec<Feedback>>,
    arrivals: ArrivalSampler,
    arrival_rng: ChaCha8Rng,
    match_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    edge_rng: ChaCha8Rng,
    free_nodes: Option<Vec<Vec<u32>>>,
    hasher: Sha256,
}

impl SimState {
    pub fn new(params: &ModelParams, capacity: Vec<u64>, seed: u64, backend: Backend) -> Result<Self> {
        let free_nodes = match backend {
            Backend::Counts => None,
            Backend::Graph => {
                let mut next = 0u32;
                Some(
                    capacity
                        .iter()
                        .map(|&k| {
                            let ids = (next..next + k as u32).collect();
                            next += k as u32;
                            ids
                        })
                        .collect(),
                )
            }
        };
        Ok(SimState {
            time: 0,
            matched: vec![0; capacity.len()],
            capacity,
            feedback_log: None,
            arrivals: ArrivalSampler::new(params)?,
            arrival_rng: stream(seed, STREAM_ARRIVALS),
            match_rng: stream(seed, STREAM_MATCH),
            policy_rng: stream(seed, STREAM_POLICY),
            edge_rng: stream(seed, STREAM_EDGES),
            free_nodes,
            hasher: Sha256::new(),
        })
    }

    pub fn with_feedback_log(mut self) -> Self {
        self.feedback_log = Some(Vec::new());
        self
    }

    /// Hex digest of the arrival classes drawn so far.
    pub fn arrival_hash(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    pub fn step(&mut self, policy: &mut Policy, params: &ModelParams) -> MatchOutcome {
        let d = self.arrivals.sample(&mut self.arrival_rng);
        self.hasher.update((d as u32).to_le_bytes());
        let u: f64 = self.match_rng.random();
        self.time += 1;
        let ctx = ChoiceContext {
            params,
            caps: &self.capacity,
            matched: &self.matched,
            d,
            t: self.time,
        };
        let c = match policy.choose(&ctx, &mut self.policy_rng) {
            Choice::Class(c) => c,
            Choice::Abstain => {
                return MatchOutcome {
                    chosen: None,
                    arrival: d,
                    matched: false,
                }
            }
        };
        let m = self.matched[c];
        let free = self.capacity[c] - m;
        let a = params.affinity[c][d];
        let matched = if free == 0 {
            false
        } else if let Some(lists) = self.free_nodes.as_mut() {
            let p = a / params.n();
            let list = &mut lists[c];
            let mut neighbours: Vec<usize> = Vec::new();
            for i in 0..list.len() {
                if self.edge_rng.random::<f64>() < p {
                    neighbours.push(i);
                }
            }
            if neighbours.is_empty() {
                false
            } else {
                let pick = neighbours[self.edge_rng.random_range(0..neighbours.len())];
                list.swap_remove(pick);
                true
            }
        } else {
            u < 1.0 - no_edge_probability(a, params.n(), free)
        };
        if matched {
            self.matched[c] += 1;
        }
        debug_assert!(self.matched[c] <= self.capacity[c]);
        policy.observe(c, d, m, matched);
        if let Some(log) = self.feedback_log.as_mut() {
            log.push(Feedback { c, d, m, y: matched });
        }
        MatchOutcome {
            chosen: Some(c),
            arrival: d,
            matched,
        }
    }
}

/// One step of the process; see [`SimState::step`].
pub fn step(state: &mut SimState, policy: &mut Policy, params: &ModelParams) -> MatchOutcome {
    state.step(policy, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<u64>,
    /// `counts[i][c]` is `M_c(times[i])`.
    pub counts: Vec<Vec<u64>>,
    pub capacity: Vec<u64>,
    pub seed: u64,
    pub policy: String,
    pub arrival_hash: String,
    #[serde(skip)]
    pub feedback: Option<Vec<Feedback>>,
}

impl Trajectory {
    pub fn final_counts(&self) -> &[u64] {
        self.counts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total_matched(&self) -> u64 {
        self.final_counts().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub backend: Backend,
    pub offline_mode: OfflineMode,
    /// Defaults to `max(1, T / 1000)`.
    pub sample_stride: Option<u64>,
    pub record_feedback: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            backend: Backend::Counts,
            offline_mode: OfflineMode::Rounding,
            sample_stride: None,
            record_feedback: false,
        }
    }
}

pub fn default_stride(t: u64) -> u64 {
    (t / 1000).max(1)
}

/// Sample times `0, s, 2s, ..., T` (with `T` always included).
pub fn sample_grid(t: u64, stride: u64) -> Vec<u64> {
    let stride = stride.max(1);
    let mut g: Vec<u64> = (0..=t).step_by(stride as usize).collect();
    if *g.last().unwrap() != t {
        g.push(t);
    }
    g
}

pub fn capacities(params: &ModelParams, mode: OfflineMode, seed: u64) -> Vec<u64> {
    realize_offline_counts(params, mode, &mut stream(seed, STREAM_OFFLINE))
}

/// Runs `T` steps of `spec` from the empty matching.
pub fn run(params: &ModelParams, spec: &PolicySpec, seed: u64, opts: &RunOptions) -> Result<Trajectory> {
    params.validate()?;
    let caps = capacities(params, opts.offline_mode, seed);
    let policy = Policy::build(spec, params, &caps)?;
    run_policy(params, policy, caps, seed, opts)
}

/// Runs a pre-built policy on the given capacities.
pub fn run_policy(
    params: &ModelParams,
    mut policy: Policy,
    caps: Vec<u64>,
    seed: u64,
    opts: &RunOptions,
) -> Result<Trajectory> {
    if caps.len() != params.c() {
        return Err(Error::invalid("capacity", "length differs from class count"));
    }
    let t_end = params.horizon();
    let stride = opts.sample_stride.unwrap_or_else(|| default_stride(t_end));
    let grid = sample_grid(t_end, stride);
    let mut state = SimState::new(params, caps, seed, opts.backend)?;
    if opts.record_feedback {
        state = state.with_feedback_log();
    }
    let mut counts = Vec::with_capacity(grid.len());
    for &t in &grid {
        while state.time < t {
            state.step(&mut policy, params);
        }
        counts.push(state.matched.clone());
    }
    Ok(Trajectory {
        times: grid,
        counts,
        arrival_hash: state.arrival_hash(),
        capacity: state.capacity.clone(),
        seed,
        policy: policy.tag().to_string(),
        feedback: state.feedback_log.take(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub times: Vec<u64>,
    /// `mean[i][c]` at `times[i]`.
    pub mean: Vec<Vec<f64>>,
    /// Population standard deviation (divides by the number of runs).
    pub std: Vec<Vec<f64>>,
    pub runs: usize,
}

pub fn average_trajectories(trajectories: &[Trajectory]) -> Result<TrajectoryStats> {
    let first = trajectories.first().ok_or(Error::MismatchedGrid)?;
    if trajectories
        .iter()
        .any(|t| t.times != first.times || t.capacity.len() != first.capacity.len())
    {
        return Err(Error::MismatchedGrid);
    }
    let n = trajectories.len() as f64;
    let cn = first.capacity.len();
    let mut mean = vec![vec![0.0; cn]; first.times.len()];
    let mut std = vec![vec![0.0; cn]; first.times.len()];
    for i in 0..first.times.len() {
        for c in 0..cn {
            let m = trajectories.iter().map(|t| t.counts[i][c] as f64).sum::<f64>() / n;
            let v = trajectories
                .iter()
                .map(|t| (t.counts[i][c] as f64 - m).powi(2))
                .sum::<f64>()
                / n;
            mean[i][c] = m;
            std[i][c] = v.sqrt();
        }
    }
    Ok(TrajectoryStats {
        times: first.times.clone(),
        mean,
        std,
        runs: trajectories.len(),
    })
}
