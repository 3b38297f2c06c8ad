//! Subcommand implementations.

use std::path::PathBuf;

use dynrd::aggregate::{event_study, CohortEstimate};
use dynrd::bandwidth::BandwidthPair;
use dynrd::data::{load_panel, write_panel, Panel};
use dynrd::pretrend::pretest_panel;
use dynrd::sim::{event_time_truth, monte_carlo, simulate};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;
use crate::output::{Metadata, OutDir};

fn open(command: &str, cfg: &RunConfig, over: &Overrides) -> Result<OutDir, CliError> {
    OutDir::create(&cfg.out_dir, Metadata::new(command, cfg, over))
}

fn read_input(cfg: &RunConfig) -> Result<Panel, CliError> {
    let path = cfg.input()?;
    log::info!("reading {}", path.display());
    Ok(load_panel(path, &cfg.data.columns, cfg.data.cutoff)?)
}

fn summary(command: &str, files: Vec<PathBuf>) -> Value {
    json!({
        "command": command,
        "outputs": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    })
}

#[derive(Serialize)]
struct CohortRow<'a> {
    tau: i64,
    cohort: &'a str,
    periods: String,
    n_units: usize,
    theta_hat: f64,
    bias_hat: f64,
    estimate: f64,
    se: f64,
    ci_lo: f64,
    ci_hi: f64,
    h: f64,
    b: f64,
    n_above: usize,
    n_below: usize,
    variance_clamped: bool,
}

impl<'a> From<&'a CohortEstimate> for CohortRow<'a> {
    fn from(c: &'a CohortEstimate) -> Self {
        let periods: Vec<String> = c.g_periods.iter().map(i64::to_string).collect();
        Self {
            tau: c.tau,
            cohort: &c.cohort_id,
            periods: periods.join("+"),
            n_units: c.n_units,
            theta_hat: c.est.theta_hat,
            bias_hat: c.est.bias_hat,
            estimate: c.est.theta_bc,
            se: c.est.se,
            ci_lo: c.est.ci.0,
            ci_hi: c.est.ci.1,
            h: c.est.h,
            b: c.est.b,
            n_above: c.est.n_above,
            n_below: c.est.n_below,
            variance_clamped: c.est.variance_clamped,
        }
    }
}

#[derive(Serialize)]
struct CohortBandwidths<'a> {
    cohort: &'a str,
    tau: i64,
    h: f64,
    b: f64,
    selection: Option<&'a BandwidthPair>,
}

pub fn estimate(command: &str, cfg: &RunConfig, over: &Overrides) -> Result<Value, CliError> {
    let panel = read_input(cfg)?;
    let study = event_study(&panel, &cfg.study_config())?;
    for notice in &study.notices {
        log::warn!("{notice}");
    }
    let out = open(command, cfg, over)?;
    let bandwidths: Vec<CohortBandwidths> = study
        .cohorts
        .iter()
        .map(|c| CohortBandwidths {
            cohort: &c.cohort_id,
            tau: c.tau,
            h: c.est.h,
            b: c.est.b,
            selection: c.bandwidths.as_ref(),
        })
        .collect();
    let files = vec![
        out.csv("event_study.csv", &study.rows)?,
        out.csv("cohorts.csv", study.cohorts.iter().map(CohortRow::from))?,
        out.json(
            "event_study.json",
            &json!({
                "rows": study.rows,
                "aggregates": study.aggregates,
                "notices": study.notices,
            }),
        )?,
        out.json("bandwidths.json", &json!({ "cohorts": bandwidths }))?,
    ];
    Ok(summary(command, files))
}

pub fn simulate_panel(command: &str, cfg: &RunConfig, over: &Overrides) -> Result<Value, CliError> {
    let draw = simulate(&cfg.sim, 0)?;
    let mut body = Vec::new();
    write_panel(&draw.panel, &mut body, &cfg.data.columns)?;
    let out = open(command, cfg, over)?;
    let horizons: Vec<Value> = (0..=cfg.sim.t_bar as i64)
        .map(|tau| json!({ "tau": tau, "theta": event_time_truth(&cfg.sim, tau) }))
        .collect();
    let files = vec![
        out.commented("panel.csv", &body)?,
        out.json(
            "truth.json",
            &json!({
                "horizons": horizons,
                "theta0_by_period": draw.theta0,
                "theta1_by_period": draw.theta1,
            }),
        )?,
    ];
    Ok(summary(command, files))
}

#[derive(Serialize)]
struct PlotRow {
    tau: i64,
    true_theta: f64,
    mean_estimate: f64,
    sd_estimate: f64,
    mean_se: f64,
    coverage: f64,
    coverage_realized: f64,
    n: usize,
}

pub fn monte_carlo_study(command: &str, cfg: &RunConfig, over: &Overrides) -> Result<Value, CliError> {
    let report = monte_carlo(&cfg.sim, cfg.mc.reps, &cfg.mc_config())?;
    let runtime = report.runtime_secs;
    let mut body = serde_json::to_value(&report).expect("report serialises");
    if let Value::Object(fields) = &mut body {
        fields.remove("runtime_secs");
    }
    let out = open(command, cfg, over)?;
    let plot = report.per_tau.iter().map(|s| PlotRow {
        tau: s.tau,
        true_theta: s.true_theta,
        mean_estimate: s.mean_estimate,
        sd_estimate: s.sd_estimate,
        mean_se: s.mean_se,
        coverage: s.coverage,
        coverage_realized: s.coverage_realized,
        n: s.n,
    });
    let files = vec![
        out.json(
            "mc_report.json",
            &json!({ "report": body, "timing": { "runtime_secs": runtime } }),
        )?,
        out.csv("mc_plot.csv", plot)?,
    ];
    let mut result = summary(command, files);
    result["failed_reps"] = json!(report.failed_reps);
    result["runtime_secs"] = json!(runtime);
    Ok(result)
}

pub fn test_ct(command: &str, cfg: &RunConfig, over: &Overrides) -> Result<Value, CliError> {
    let panel = read_input(cfg)?;
    let pre = pretest_panel(&panel, &cfg.pretest_config(), &cfg.estimation_config())?;
    let out = open(command, cfg, over)?;
    let alpha = cfg.estimation.alpha;
    let mut body = serde_json::to_value(&pre.result).expect("result serialises");
    if let Value::Object(fields) = &mut body {
        fields.insert("alpha".into(), json!(alpha));
        fields.insert("reject".into(), json!(pre.result.rejects(alpha)));
        fields.insert("focal_periods".into(), json!(pre.focal_periods));
        fields.insert("n_units".into(), json!(pre.n_units));
        fields.insert("above".into(), json!(pre.above));
        fields.insert("below".into(), json!(pre.below));
        fields.insert("bandwidths".into(), json!(pre.bandwidths));
    }
    let files = vec![out.json("pretest.json", &body)?];
    let mut result = summary(command, files);
    result["stat"] = json!(pre.result.stat);
    result["p_value"] = json!(pre.result.p_value);
    Ok(result)
}
