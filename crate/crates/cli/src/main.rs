//! `sbmm`: simulator, fluid limits and experiments for online matching on
//! sparse stochastic block models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use sbm_matching::{Backend, OfflineMode};

use config::{parse_seeds, PolicyName, Resolved, RunConfig, SeedsSpec};

#[derive(Debug, Parser)]
#[command(name = "sbmm", version, about = "Online matching on sparse stochastic block models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model file (JSON). Defaults to the seeded Figure-1 instance.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Seed of the default Figure-1 instance.
    #[arg(long, global = true)]
    instance_seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    policy: Option<PolicyName>,
    /// Seeds as `0..19` (inclusive) or `1,4,9`.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long, global = true, env = config::OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    /// Exploration exponent of LearnedBalance.
    #[arg(long, global = true)]
    q: Option<f64>,
    /// Confidence level of the estimator.
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<Backend>,
    #[arg(long, global = true)]
    sample_stride: Option<u64>,
    #[arg(long, global = true, value_parser = parse_offline_mode)]
    offline_mode: Option<OfflineMode>,
    /// Number of grid points for fluid curves.
    #[arg(long, global = true)]
    grid_points: Option<usize>,
    /// Rescale budgets and arrival law to sum to one before validating.
    #[arg(long, global = true)]
    renormalize: bool,
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a model file against every invariant.
    Validate { model: PathBuf },
    /// Solve the transport program for the Myopic plan.
    Qstar,
    /// Simulate one policy over the given seeds.
    Simulate,
    /// Solve the Myopic fluid ODE and its surrogate.
    FluidMyopic,
    /// Evaluate the Balance fluid limit, at one time with `--t`.
    FluidBalance {
        #[arg(long)]
        t: Option<f64>,
    },
    /// Print the Balance phase schedule.
    Schedule,
    /// Estimate a failure probability from a simulated feedback log.
    Estimate {
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long, default_value_t = 0)]
        arrival: usize,
        #[arg(long, default_value_t = 0)]
        m: u64,
    },
    /// Sup-deviation from the fluid limit as N grows.
    Convergence {
        /// Comma-separated offline scales.
        #[arg(long, value_delimiter = ',')]
        n_list: Option<Vec<u64>>,
    },
    /// Regret of LearnedBalance against Balance as T grows.
    Regret {
        /// Comma-separated horizons.
        #[arg(long, value_delimiter = ',')]
        t_list: Option<Vec<u64>>,
        /// Horizon factor T/N.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Reproduce the Figure-1 comparison of all policies.
    Figure1,
    /// Render a CSV produced by another subcommand as an SVG line chart.
    Plot {
        csv: PathBuf,
        #[arg(long, default_value = "t")]
        x: String,
        #[arg(long)]
        y: String,
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    match s {
        "counts" => Ok(Backend::Counts),
        "graph" => Ok(Backend::Graph),
        _ => Err(format!("unknown backend `{s}` (counts, graph)")),
    }
}

fn parse_offline_mode(s: &str) -> Result<OfflineMode, String> {
    match s {
        "rounding" => Ok(OfflineMode::Rounding),
        "sampled" => Ok(OfflineMode::Sampled),
        _ => Err(format!("unknown offline mode `{s}` (rounding, sampled)")),
    }
}

impl Common {
    fn flags(&self) -> Result<RunConfig> {
        if let Some(s) = &self.seeds {
            parse_seeds(s)?;
        }
        Ok(RunConfig {
            model: self.model.clone(),
            instance_seed: self.instance_seed,
            policy: self.policy,
            seeds: self.seeds.clone().map(SeedsSpec::Text),
            out_dir: self.out_dir.clone(),
            q: self.q,
            delta: self.delta,
            backend: self.backend,
            sample_stride: self.sample_stride,
            offline_mode: self.offline_mode,
            grid_points: self.grid_points,
            n_list: None,
            t_list: None,
            alpha: None,
            renormalize: self.renormalize.then_some(true),
        })
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate { .. } => "validate",
        Command::Qstar => "qstar",
        Command::Simulate => "simulate",
        Command::FluidMyopic => "fluid-myopic",
        Command::FluidBalance { .. } => "fluid-balance",
        Command::Schedule => "schedule",
        Command::Estimate { .. } => "estimate",
        Command::Convergence { .. } => "convergence",
        Command::Regret { .. } => "regret",
        Command::Figure1 => "figure1",
        Command::Plot { .. } => "plot",
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Command::Plot {
        csv,
        x,
        y,
        group,
        output,
    } = &cli.command
    {
        commands::plot(csv, x, y, group.as_deref(), output.clone())?;
        return Ok(());
    }
    let file = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut flags = cli.common.flags()?;
    match &cli.command {
        Command::Validate { model } => flags.model = Some(model.clone()),
        Command::Convergence { n_list } => flags.n_list = n_list.clone(),
        Command::Regret { t_list, alpha } => {
            flags.t_list = t_list.clone();
            flags.alpha = *alpha;
        }
        _ => {}
    }
    let resolved = Resolved::new(command_name(&cli.command), file.merge(flags))?;
    if let Command::Validate { .. } = cli.command {
        return commands::validate(&resolved.params, &resolved.model_source);
    }
    resolved.echo()?;
    match cli.command {
        Command::Qstar => commands::qstar(&resolved),
        Command::Simulate => commands::simulate(&resolved),
        Command::FluidMyopic => commands::fluid_myopic(&resolved),
        Command::FluidBalance { t } => commands::fluid_balance(&resolved, t),
        Command::Schedule => commands::schedule(&resolved),
        Command::Estimate { class, arrival, m } => commands::estimate(&resolved, class, arrival, m),
        Command::Convergence { .. } => commands::convergence(&resolved),
        Command::Regret { .. } => commands::regret(&resolved),
        Command::Figure1 => commands::figure1(&resolved),
        Command::Validate { .. } | Command::Plot { .. } => unreachable!(),
    }
}

fn error_json(kind: &str, err: &anyhow::Error) -> serde_json::Value {
    let mut v = serde_json::json!({
        "error": kind,
        "message": format!("{err:#}"),
    });
    if let Some(sbm_matching::Error::InvalidParams { field, .. }) = err.downcast_ref::<sbm_matching::Error>() {
        v["field"] = serde_json::Value::from(*field);
    }
    v
}

fn is_usage(err: &anyhow::Error) -> bool {
    matches!(err.downcast_ref::<sbm_matching::Error>(), Some(sbm_matching::Error::Usage(_)))
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                let v = serde_json::json!({ "error": "usage", "message": e.to_string().trim() });
                eprintln!("{v}");
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let usage = is_usage(&err);
            if json_errors {
                eprintln!("{}", error_json(if usage { "usage" } else { "runtime" }, &err));
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
