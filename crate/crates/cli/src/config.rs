//! Run configuration: a JSON file whose values are overridden by flags,
//! resolved into the concrete inputs of a subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sbm_matching::engine::RunOptions;
use sbm_matching::policies::PolicySpec;
use sbm_matching::{Backend, ModelParams, OfflineMode};
use serde::{Deserialize, Serialize};

pub const OUT_DIR_ENV: &str = "SBMM_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "sbmm-out";
pub const DEFAULT_INSTANCE_SEED: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    Myopic,
    Balance,
    RealBalance,
    LearnedBalance,
    Uniform,
}

/// Seeds as a list or as a range string such as `"0..19"` (inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedsSpec {
    List(Vec<u64>),
    Text(String),
}

impl SeedsSpec {
    pub fn expand(&self) -> Result<Vec<u64>> {
        match self {
            SeedsSpec::List(v) => Ok(v.clone()),
            SeedsSpec::Text(s) => parse_seeds(s),
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    sbm_matching::Error::Usage(msg.into()).into()
}

/// `a..b` and `a..=b` are inclusive ranges; otherwise a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    let num = |x: &str| {
        x.trim()
            .parse::<u64>()
            .map_err(|_| usage(format!("bad seed `{x}` in `{s}`")))
    };
    if let Some((a, b)) = s.split_once("..") {
        let (lo, hi) = (num(a)?, num(b.trim_start_matches('='))?);
        if hi < lo {
            return Err(usage(format!("empty seed range `{s}`")));
        }
        return Ok((lo..=hi).collect());
    }
    let v: Vec<u64> = s.split(',').map(num).collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(usage("no seeds given"));
    }
    Ok(v)
}

/// Contents of `--config run.json`. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub instance_seed: Option<u64>,
    pub policy: Option<PolicyName>,
    pub seeds: Option<SeedsSpec>,
    pub out_dir: Option<PathBuf>,
    pub q: Option<f64>,
    pub delta: Option<f64>,
    pub backend: Option<Backend>,
    pub sample_stride: Option<u64>,
    pub offline_mode: Option<OfflineMode>,
    pub grid_points: Option<usize>,
    pub n_list: Option<Vec<u64>>,
    pub t_list: Option<Vec<u64>>,
    pub alpha: Option<f64>,
    pub renormalize: Option<bool>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // Model paths are relative to the config file.
        if let (Some(m), Some(dir)) = (&cfg.model, path.parent()) {
            if m.is_relative() {
                cfg.model = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    /// Fields set in `over` replace those in `self`.
    pub fn merge(self, over: RunConfig) -> RunConfig {
        RunConfig {
            model: over.model.or(self.model),
            instance_seed: over.instance_seed.or(self.instance_seed),
            policy: over.policy.or(self.policy),
            seeds: over.seeds.or(self.seeds),
            out_dir: over.out_dir.or(self.out_dir),
            q: over.q.or(self.q),
            delta: over.delta.or(self.delta),
            backend: over.backend.or(self.backend),
            sample_stride: over.sample_stride.or(self.sample_stride),
            offline_mode: over.offline_mode.or(self.offline_mode),
            grid_points: over.grid_points.or(self.grid_points),
            n_list: over.n_list.or(self.n_list),
            t_list: over.t_list.or(self.t_list),
            alpha: over.alpha.or(self.alpha),
            renormalize: over.renormalize.or(self.renormalize),
        }
    }
}

/// Fully resolved inputs, echoed into the output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub command: String,
    pub model_source: String,
    /// Seed of the generated default instance, when no model was given.
    pub instance_seed: Option<u64>,
    pub params: ModelParams,
    pub policy: PolicySpec,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub q: f64,
    pub delta: f64,
    pub backend: Backend,
    pub sample_stride: Option<u64>,
    pub offline_mode: OfflineMode,
    pub grid_points: usize,
    pub n_list: Vec<u64>,
    pub t_list: Vec<u64>,
    pub alpha: f64,
    pub renormalize: bool,
}

pub fn policy_spec(name: PolicyName, q: f64, delta: f64) -> PolicySpec {
    match name {
        PolicyName::Myopic => PolicySpec::Myopic,
        PolicyName::Balance => PolicySpec::Balance,
        PolicyName::RealBalance => PolicySpec::RealBalance,
        PolicyName::LearnedBalance => PolicySpec::LearnedBalance {
            q,
            delta,
            explore_horizon: None,
        },
        PolicyName::Uniform => PolicySpec::Uniform,
    }
}

impl Resolved {
    pub fn new(command: &str, cfg: RunConfig) -> Result<Self> {
        let renormalize = cfg.renormalize.unwrap_or(false);
        let (params, model_source, instance_seed) = match &cfg.model {
            Some(path) => {
                let p = ModelParams::from_path(path).with_context(|| format!("loading model {}", path.display()))?;
                (p, path.display().to_string(), None)
            }
            None => {
                let seed = cfg.instance_seed.unwrap_or(DEFAULT_INSTANCE_SEED);
                (ModelParams::figure1_default(seed), "figure1-default".to_string(), Some(seed))
            }
        };
        let params = if renormalize { params.renormalized() } else { params };
        params.validate()?;
        let q = cfg.q.unwrap_or(0.5);
        let delta = cfg.delta.unwrap_or(0.05);
        let out_dir = cfg
            .out_dir
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        Ok(Resolved {
            command: command.to_string(),
            model_source,
            instance_seed,
            policy: policy_spec(cfg.policy.unwrap_or(PolicyName::Balance), q, delta),
            seeds: match &cfg.seeds {
                Some(s) => s.expand()?,
                None => (0..20).collect(),
            },
            out_dir,
            q,
            delta,
            backend: cfg.backend.unwrap_or_default(),
            sample_stride: cfg.sample_stride,
            offline_mode: cfg.offline_mode.unwrap_or_default(),
            grid_points: cfg.grid_points.unwrap_or(1001).max(2),
            n_list: cfg.n_list.unwrap_or_else(|| vec![500, 1000, 2000, 4000]),
            t_list: cfg.t_list.unwrap_or_else(|| vec![2000, 5000, 10_000, 20_000]),
            alpha: cfg.alpha.unwrap_or(2.0),
            renormalize,
            params,
        })
    }

    pub fn run_options(&self, record_feedback: bool) -> RunOptions {
        RunOptions {
            backend: self.backend,
            offline_mode: self.offline_mode,
            sample_stride: self.sample_stride,
            record_feedback,
        }
    }

    /// Content hash of the inputs; the output location is not an input.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
        }
        Ok(sbm_matching::io::config_hash(&v)?)
    }

    /// Creates the output directory and writes `resolved_config.json`.
    pub fn echo(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating output directory {}", self.out_dir.display()))?;
        let path = self.out_dir.join("resolved_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges_are_inclusive() {
        assert_eq!(parse_seeds("0..19").unwrap().len(), 20);
        assert_eq!(parse_seeds("3..=5").unwrap(), vec![3, 4, 5]);
        assert_eq!(parse_seeds("4,1").unwrap(), vec![4, 1]);
        assert!(parse_seeds("5..1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = RunConfig {
            q: Some(0.3),
            alpha: Some(4.0),
            ..Default::default()
        };
        let flags = RunConfig {
            q: Some(0.7),
            ..Default::default()
        };
        let m = file.merge(flags);
        assert_eq!((m.q, m.alpha), (Some(0.7), Some(4.0)));
    }

    #[test]
    fn seeds_accept_list_or_text() {
        let a: RunConfig = serde_json::from_str(r#"{"seeds": [1, 2]}"#).unwrap();
        let b: RunConfig = serde_json::from_str(r#"{"seeds": "1..2"}"#).unwrap();
        assert_eq!(a.seeds.unwrap().expand().unwrap(), b.seeds.unwrap().expand().unwrap());
    }
}
