//! One function per subcommand. Each writes its artifacts into the
//! resolved output directory and prints a short summary on stdout.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sbm_matching::engine::average_trajectories;
use sbm_matching::estimator::{d_exact, dhat, CountsTable};
use sbm_matching::experiments::{
    convergence_study, figure1_repro, regret_experiment, rescale, run_seeds, ConvergenceConfig, Figure1Config,
    RegretConfig,
};
use sbm_matching::fluid_balance::{build_schedule, m_star, m_star_grid};
use sbm_matching::fluid_myopic::{solve_ode, uniform_grid};
use sbm_matching::io::{
    m_star_table, myopic_fluid_table, qplan_table, render_svg, schedule_table, stats_table, table_series,
    trajectory_table, CsvTable, Series,
};
use sbm_matching::transport::solve_qstar;
use sbm_matching::ModelParams;
use serde_json::json;

use crate::config::Resolved;

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

pub fn validate(params: &ModelParams, source: &str) -> Result<()> {
    params.validate()?;
    println!(
        "ok: {source} (C={}, D={}, N={}, T={})",
        params.c(),
        params.d(),
        params.offline_scale,
        params.horizon()
    );
    Ok(())
}

pub fn qstar(r: &Resolved) -> Result<()> {
    let q = solve_qstar(&r.params)?;
    qplan_table(&q).write(r.out("qstar.csv"), &r.hash()?)?;
    println!("{}", serde_json::to_string_pretty(&q)?);
    Ok(())
}

pub fn simulate(r: &Resolved) -> Result<()> {
    let opts = r.run_options(false);
    let trs = run_seeds(&r.params, &r.policy, &r.seeds, &opts)?;
    let hash = r.hash()?;
    let tag = r.policy.tag();
    for tr in &trs {
        trajectory_table(tr).write(r.out(&format!("trajectory_{tag}_seed{}.csv", tr.seed)), &hash)?;
    }
    let stats = average_trajectories(&trs)?;
    stats_table(&stats, tag).write(r.out(&format!("aggregate_{tag}.csv")), &hash)?;
    let totals: Vec<u64> = trs.iter().map(|t| t.total_matched()).collect();
    let mean = totals.iter().sum::<u64>() as f64 / totals.len() as f64;
    write_json(
        &r.out(&format!("simulate_{tag}.json")),
        &json!({
            "config_hash": r.hash()?,
            "policy": tag,
            "seeds": r.seeds,
            "totals": totals,
            "mean_total": mean,
            "capacity": trs[0].capacity,
            "arrival_hashes": trs.iter().map(|t| &t.arrival_hash).collect::<Vec<_>>(),
        }),
    )?;
    println!("{tag}: {} runs, mean total matches {mean:.2}", trs.len());
    Ok(())
}

pub fn fluid_myopic(r: &Resolved) -> Result<()> {
    let q = solve_qstar(&r.params)?;
    let grid = uniform_grid(r.params.horizon_factor, r.grid_points);
    let f = solve_ode(&r.params, &q, &grid)?;
    myopic_fluid_table(&f).write(r.out("fluid_myopic.csv"), &r.hash()?)?;
    let mut series = Vec::new();
    for c in 0..r.params.c() {
        series.push(Series {
            name: format!("y[{c}]"),
            points: grid.iter().copied().zip(f.y[c].iter().copied()).collect(),
            dashed: false,
        });
        series.push(Series {
            name: format!("y_tilde[{c}]"),
            points: grid.iter().copied().zip(f.y_tilde[c].iter().copied()).collect(),
            dashed: true,
        });
    }
    write_svg(&r.out("fluid_myopic.svg"), &render_svg("Myopic fluid limit", "t", "y", &series))?;
    println!("{}", serde_json::to_string(&json!({ "L": f.l, "J": f.j }))?);
    Ok(())
}

pub fn fluid_balance(r: &Resolved, t: Option<f64>) -> Result<()> {
    let s = build_schedule(&r.params)?;
    if let Some(t) = t {
        println!("{}", serde_json::to_string(&m_star(&r.params, &s, t)?)?);
        return Ok(());
    }
    let grid = uniform_grid(r.params.horizon_factor, r.grid_points);
    let m = m_star_grid(&r.params, &s, &grid)?;
    m_star_table(&grid, &m).write(r.out("m_star.csv"), &r.hash()?)?;
    let series: Vec<Series> = m
        .iter()
        .enumerate()
        .map(|(c, row)| Series {
            name: format!("m*[{c}]"),
            points: grid.iter().copied().zip(row.iter().copied()).collect(),
            dashed: false,
        })
        .collect();
    write_svg(&r.out("m_star.svg"), &render_svg("Balance fluid limit", "t", "m*", &series))?;
    let last: Vec<f64> = m.iter().map(|row| *row.last().unwrap()).collect();
    println!("{}", serde_json::to_string(&json!({ "alpha": r.params.horizon_factor, "m_star_alpha": last }))?);
    Ok(())
}

pub fn schedule(r: &Resolved) -> Result<()> {
    let s = build_schedule(&r.params)?;
    schedule_table(&s).write(r.out("schedule.csv"), &r.hash()?)?;
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

/// Runs the first seed with feedback logging and estimates `D_{c,d}(m)`
/// from the log.
pub fn estimate(r: &Resolved, c: usize, d: usize, m: u64) -> Result<()> {
    if c >= r.params.c() || d >= r.params.d() {
        return Err(sbm_matching::Error::Usage(format!(
            "class pair ({c}, {d}) out of range for a {}x{} instance",
            r.params.c(),
            r.params.d()
        ))
        .into());
    }
    let seed = r.seeds[0];
    let opts = r.run_options(true);
    let tr = sbm_matching::run(&r.params, &r.policy, seed, &opts)?;
    let log = tr.feedback.as_deref().unwrap_or_default();
    let counts = CountsTable::from_feedback(&tr.capacity, r.params.d(), log)?;
    let report = dhat(&counts, &r.params, c, d, m, r.delta)?;
    let truth = d_exact(&r.params, tr.capacity[c], c, d, m);
    let out = json!({
        "seed": seed,
        "policy": r.policy.tag(),
        "class": c,
        "arrival_class": d,
        "m": m,
        "estimate": report,
        "d_exact": truth,
        "abs_error": (report.dhat - truth).abs(),
    });
    write_json(&r.out("estimate.json"), &out)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub fn convergence(r: &Resolved) -> Result<()> {
    let cfg = ConvergenceConfig {
        template: r.params.clone(),
        policy: r.policy.clone(),
        n_list: r.n_list.clone(),
        seeds: r.seeds.clone(),
        q: r.q,
        backend: r.backend,
    };
    let rep = convergence_study(&cfg)?;
    let mut t = CsvTable::new(&["n", "class", "mean_sup_deviation", "max_sup_deviation", "bound"]);
    for l in &rep.levels {
        for (c, &bound) in l.bound.iter().enumerate() {
            let devs: Vec<f64> = l.per_seed.iter().map(|s| s[c]).collect();
            let mean = devs.iter().sum::<f64>() / devs.len() as f64;
            let max = devs.iter().cloned().fold(0.0, f64::max);
            t.push([l.n as f64, c as f64, mean, max, bound]);
        }
    }
    t.write(r.out("convergence.csv"), &rep.meta.config_hash)?;
    write_json(&r.out("convergence.json"), &rep)?;
    let series = table_series(&t, "n", "mean_sup_deviation", Some("class"))?;
    write_svg(
        &r.out("convergence.svg"),
        &render_svg("Sup-deviation from the fluid limit", "N", "deviation", &series),
    )?;
    println!(
        "{}: log-log slope {:.3} over N = {:?}",
        rep.policy, rep.fit.slope, r.n_list
    );
    Ok(())
}

pub fn regret(r: &Resolved) -> Result<()> {
    let cfg = RegretConfig {
        template: r.params.clone(),
        q: r.q,
        t_list: r.t_list.clone(),
        seeds: r.seeds.clone(),
        alpha: r.alpha,
    };
    let rep = regret_experiment(&cfg)?;
    let mut t = CsvTable::new(&["t", "n", "explore_horizon", "mean_regret", "std_regret"]);
    for x in &rep.records {
        t.push([x.t as f64, x.n as f64, x.explore_horizon as f64, x.mean, x.std]);
    }
    t.write(r.out("regret.csv"), &rep.meta.config_hash)?;
    write_json(&r.out("regret.json"), &rep)?;
    println!(
        "fitted exponent {:.3} (reference (q+3)/4 = {:.3}), {} mean(s) clipped",
        rep.fit.slope,
        (r.q + 3.0) / 4.0,
        rep.clipped
    );
    Ok(())
}

pub fn figure1(r: &Resolved) -> Result<()> {
    let cfg = Figure1Config {
        params: r.params.clone(),
        seeds: r.seeds.clone(),
        q: r.q,
        instance_seed: r.instance_seed,
    };
    let out = figure1_repro(&cfg)?;
    let params = rescale(&r.params, r.params.offline_scale);
    let n = params.n();
    let mut t = CsvTable::new(&["t", "class", "series", "value"]);
    let mut series = Vec::new();
    for run in &out.runs {
        for c in 0..params.c() {
            let mut pts = Vec::new();
            for (i, &time) in out.times.iter().enumerate() {
                let v = run.stats.mean[i][c] / n;
                t.push([time.to_string(), c.to_string(), run.policy.clone(), v.to_string()]);
                pts.push((time as f64, v));
            }
            series.push(Series {
                name: format!("{}[{c}]", run.policy),
                points: pts,
                dashed: false,
            });
        }
    }
    for (label, lim) in [("m_star", &out.m_star), ("myopic_ode", &out.ode)] {
        for (c, row) in lim.iter().enumerate() {
            for (i, &time) in out.times.iter().enumerate() {
                t.push([time.to_string(), c.to_string(), label.to_string(), row[i].to_string()]);
            }
            series.push(Series {
                name: format!("{label}[{c}]"),
                points: out.times.iter().map(|&x| x as f64).zip(row.iter().copied()).collect(),
                dashed: true,
            });
        }
    }
    t.write(r.out("figure1.csv"), &out.meta.config_hash)?;
    write_svg(
        &r.out("figure1.svg"),
        &render_svg("Matched fraction per class", "arrivals", "M_c / N", &series),
    )?;
    let summary = json!({
        "meta": out.meta,
        "mean_totals": out.runs.iter().map(|x| (x.policy.clone(), x.mean_total)).collect::<Vec<_>>(),
        "totals": out.runs.iter().map(|x| (x.policy.clone(), x.totals.clone())).collect::<Vec<_>>(),
        "gap_to_m_star": {
            "balance": out.gap_to_m_star("balance", n),
            "real-balance": out.gap_to_m_star("real-balance", n),
            "learned-balance": out.gap_to_m_star("learned-balance", n),
        },
        "schedule": out.schedule,
    });
    write_json(&r.out("figure1.json"), &summary)?;
    for run in &out.runs {
        println!("{:>16}: mean total {:.1}", run.policy, run.mean_total);
    }
    Ok(())
}

pub fn plot(csv: &Path, x: &str, y: &str, group: Option<&str>, output: Option<PathBuf>) -> Result<PathBuf> {
    let table = CsvTable::read(csv).with_context(|| format!("reading {}", csv.display()))?;
    let series = table_series(&table, x, y, group)?;
    let title = csv.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let path = output.unwrap_or_else(|| csv.with_extension("svg"));
    write_svg(&path, &render_svg(&title, x, y, &series))?;
    println!("{}", path.display());
    Ok(path)
}
