//! Simulated referendum panels and a Monte Carlo harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{event_study, CohortSpec, EventStudy, EventStudyConfig};
use crate::data::{Panel, PanelRow};
use crate::error::{invalid, Result};
use crate::pretrend::{pretest_panel, PretestConfig};

/// Parameters of the referendum data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpParams {
    pub n: usize,
    pub t_bar: usize,
    /// Threshold a latent index must exceed for a referendum to be held.
    pub q_bar: f64,
    pub sigma2_q: f64,
    pub sigma2_uq: f64,
    pub sigma2_r: f64,
    pub sigma2_ur: f64,
    /// Mean of the initial margin.
    pub mu_r: f64,
    pub sigma2_v: f64,
    /// Loading of the outcome on the unit's average margin.
    pub eta: f64,
    /// Effect heterogeneity in the margin.
    pub phi: f64,
    pub theta0_mean: f64,
    pub theta1_mean: f64,
    pub sigma2_0: f64,
    pub sigma2_1: f64,
    /// Periods after which the effect stops growing.
    pub cap: usize,
    pub s_bar: usize,
    pub rho_q: Vec<f64>,
    pub delta_q: Vec<f64>,
    pub rho_r: Vec<f64>,
    pub delta_r: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Probability of a referendum in the initial period.
    pub p_q0: f64,
    pub seed: u64,
    /// Draw time intercepts once per period for all units; otherwise per unit and period.
    pub shared_time_effects: bool,
}

impl Default for DgpParams {
    fn default() -> Self {
        Self {
            n: 30_000,
            t_bar: 30,
            q_bar: 1.7,
            sigma2_q: 0.5,
            sigma2_uq: 1.0,
            sigma2_r: 0.01,
            sigma2_ur: 0.02,
            mu_r: 0.05,
            sigma2_v: 0.2,
            eta: 0.0,
            phi: 0.1,
            theta0_mean: 0.4,
            theta1_mean: -0.1,
            sigma2_0: 0.08 * 0.08,
            sigma2_1: 0.02 * 0.02,
            cap: 4,
            s_bar: 3,
            rho_q: vec![-0.9, -0.5, -0.1],
            delta_q: vec![0.5, 0.3, 0.1],
            rho_r: vec![-0.05, -0.03, -0.01],
            delta_r: vec![0.05, 0.03, 0.01],
            gamma: vec![0.05, 0.03, 0.01],
            p_q0: 0.1,
            seed: 20_240_601,
            shared_time_effects: true,
        }
    }
}

impl DgpParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t_bar == 0 {
            return Err(invalid("n and t_bar must be positive"));
        }
        let variances = [
            self.sigma2_q,
            self.sigma2_uq,
            self.sigma2_r,
            self.sigma2_ur,
            self.sigma2_v,
            self.sigma2_0,
            self.sigma2_1,
        ];
        if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("variances must be finite and nonnegative"));
        }
        for lags in [
            &self.rho_q,
            &self.delta_q,
            &self.rho_r,
            &self.delta_r,
            &self.gamma,
        ] {
            if lags.len() != self.s_bar {
                return Err(invalid("every lag-coefficient vector must have length s_bar"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_q0) {
            return Err(invalid("p_q0 must be a probability"));
        }
        Ok(())
    }
}

/// Stream for replication `rep`, independent of every other replication.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// A simulated panel with the cohort effect draws behind it.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub panel: Panel,
    /// Permanent effect of approval in period `g`, at index `g - 1`.
    pub theta0: Vec<f64>,
    /// Per-period growth of that effect, at index `g - 1`.
    pub theta1: Vec<f64>,
    /// Referendum state before the first panel period, by unit.
    pub initial_held: Vec<bool>,
}

impl SimDraw {
    /// Effect at event time `tau` for approvals in period `g`, evaluated at the cutoff.
    pub fn cohort_effect(&self, g: i64, tau: i64, cap: usize) -> f64 {
        if tau < 0 {
            return 0.0;
        }
        let i = (g - 1) as usize;
        self.theta0[i] + tau.min(cap as i64) as f64 * self.theta1[i]
    }
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, var: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + var.sqrt() * z
}

/// Simulate one replication.
pub fn simulate(params: &DgpParams, rep: u64) -> Result<SimDraw> {
    params.validate()?;
    let mut rng = replication_rng(params.seed, rep);
    let (n, t_bar, lags) = (params.n, params.t_bar, params.s_bar);

    let a_q: Vec<f64> = (0..n).map(|_| normal(&mut rng, 0.0, params.sigma2_q)).collect();
    let a_r: Vec<f64> = (0..n).map(|_| normal(&mut rng, 0.0, params.sigma2_r)).collect();
    let (b_q, b_r): (Vec<f64>, Vec<f64>) = if params.shared_time_effects {
        (
            (0..=t_bar)
                .map(|_| normal(&mut rng, 0.0, params.sigma2_q))
                .collect(),
            (0..=t_bar)
                .map(|_| normal(&mut rng, 0.0, params.sigma2_r))
                .collect(),
        )
    } else {
        (vec![], vec![])
    };
    let theta0: Vec<f64> = (0..t_bar)
        .map(|_| normal(&mut rng, params.theta0_mean, params.sigma2_0))
        .collect();
    let theta1: Vec<f64> = (0..t_bar)
        .map(|_| normal(&mut rng, params.theta1_mean, params.sigma2_1))
        .collect();

    // Histories indexed [unit][t] for t = 0..=t_bar.
    let width = t_bar + 1;
    let mut held = vec![false; n * width];
    let mut approved = vec![false; n * width];
    let mut margin = vec![f64::NAN; n * width];
    let mut noise = vec![0.0; n * width];

    for i in 0..n {
        let q0 = rng.random::<f64>() < params.p_q0;
        let r0 = normal(&mut rng, params.mu_r, params.sigma2_r);
        if q0 {
            held[i * width] = true;
            margin[i * width] = r0;
            approved[i * width] = r0 >= 0.0;
        }
    }

    for t in 1..=t_bar {
        for i in 0..n {
            let (bq, br) = if params.shared_time_effects {
                (b_q[t], b_r[t])
            } else {
                (
                    normal(&mut rng, 0.0, params.sigma2_q),
                    normal(&mut rng, 0.0, params.sigma2_r),
                )
            };
            let u_q = normal(&mut rng, 0.0, params.sigma2_uq);
            let u_r = normal(&mut rng, 0.0, params.sigma2_ur);
            noise[i * width + t] = normal(&mut rng, 0.0, params.sigma2_v);

            let (mut index_q, mut index_r) = (a_q[i] + bq + u_q, a_r[i] + br + u_r);
            for s in 1..=lags {
                let (q, d) = if t >= s {
                    (held[i * width + t - s], approved[i * width + t - s])
                } else {
                    (false, false)
                };
                let (q, d) = (f64::from(u8::from(q)), f64::from(u8::from(d)));
                index_q += params.rho_q[s - 1] * d + params.delta_q[s - 1] * q * (1.0 - d);
                index_r += params.rho_r[s - 1] * d
                    + params.delta_r[s - 1] * q * (1.0 - d)
                    + params.gamma[s - 1] * (1.0 - q);
            }
            if index_q > params.q_bar {
                held[i * width + t] = true;
                margin[i * width + t] = index_r;
                approved[i * width + t] = index_r >= 0.0;
            }
        }
    }

    let digits = n.to_string().len();
    let mut rows = Vec::with_capacity(n * t_bar);
    for i in 0..n {
        let base = i * width;
        let votes: Vec<usize> = (1..=t_bar).filter(|&t| held[base + t]).collect();
        let mean_margin = if votes.is_empty() {
            0.0
        } else {
            votes.iter().map(|&t| margin[base + t]).sum::<f64>() / votes.len() as f64
        };
        let approvals: Vec<usize> = votes.iter().copied().filter(|&t| approved[base + t]).collect();
        let id = format!("u{:0digits$}", i + 1);
        for t in 1..=t_bar {
            let effect: f64 = approvals
                .iter()
                .take_while(|&&g| g <= t)
                .map(|&g| {
                    theta0[g - 1]
                        + theta1[g - 1] * (t - g).min(params.cap) as f64
                        + params.phi * margin[base + g]
                })
                .sum();
            rows.push(PanelRow {
                unit_id: id.clone(),
                period: t as i64,
                q_held: held[base + t],
                r: held[base + t].then_some(margin[base + t]),
                y: effect + params.eta * mean_margin + noise[base + t],
            });
        }
    }
    Ok(SimDraw {
        panel: Panel::new(rows, 0.0)?,
        theta0,
        theta1,
        initial_held: (0..n).map(|i| held[i * width]).collect(),
    })
}

pub fn simulate_panel(params: &DgpParams) -> Result<Panel> {
    Ok(simulate(params, 0)?.panel)
}

/// Population effect at event time `tau`, averaging over cohorts.
pub fn true_theta(params: &DgpParams, tau: usize) -> f64 {
    params.theta0_mean + tau.min(params.cap) as f64 * params.theta1_mean
}

/// Target at any event time; zero before the focal period.
pub fn event_time_truth(params: &DgpParams, tau: i64) -> f64 {
    if tau < 0 {
        0.0
    } else {
        true_theta(params, tau as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub study: EventStudyConfig,
    pub pretest: Option<PretestConfig>,
    /// Worker threads; zero uses every available core.
    pub workers: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            study: EventStudyConfig::default(),
            pretest: Some(PretestConfig::default()),
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonDraw {
    pub tau: i64,
    pub estimate: f64,
    pub se: f64,
    pub covered: bool,
    /// Cohort-weighted effect actually drawn in this replication.
    pub realized_truth: f64,
    pub covered_realized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub rep: u64,
    pub horizons: Vec<HorizonDraw>,
    pub pretest_p_value: Option<f64>,
    pub error: Option<String>,
    pub pretest_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McTauSummary {
    pub tau: i64,
    pub true_theta: f64,
    pub mean_estimate: f64,
    pub sd_estimate: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub coverage_realized: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub reps: usize,
    pub failed_reps: usize,
    pub per_tau: Vec<McTauSummary>,
    pub pretest_non_rejection: Option<f64>,
    pub pretest_runs: usize,
    pub pretest_failures: usize,
    pub seed: u64,
    pub runtime_secs: f64,
    pub replications: Vec<ReplicationOutcome>,
}

impl McReport {
    pub fn tau(&self, tau: i64) -> Option<&McTauSummary> {
        self.per_tau.iter().find(|s| s.tau == tau)
    }
}

fn realized_truth(draw: &SimDraw, study: &EventStudy, tau: i64, cap: usize) -> f64 {
    let Some(agg) = study.aggregates.iter().find(|a| a.tau == tau) else {
        return f64::NAN;
    };
    study
        .cohorts
        .iter()
        .filter(|c| c.tau == tau)
        .map(|c| {
            let mean = c
                .g_periods
                .iter()
                .map(|&g| draw.cohort_effect(g, tau, cap))
                .sum::<f64>()
                / c.g_periods.len() as f64;
            agg.weights[&c.cohort_id] * mean
        })
        .sum()
}

/// Simulate and analyse replication `rep`.
pub fn run_replication(params: &DgpParams, rep: u64, cfg: &McConfig) -> ReplicationOutcome {
    let mut out = ReplicationOutcome {
        rep,
        horizons: vec![],
        pretest_p_value: None,
        error: None,
        pretest_error: None,
    };
    let draw = match simulate(params, rep) {
        Ok(d) => d,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    match event_study(&draw.panel, &cfg.study) {
        Ok(study) => {
            for row in &study.rows {
                let truth = event_time_truth(params, row.tau);
                let realized = realized_truth(&draw, &study, row.tau, params.cap);
                let covers = |x: f64| row.ci_lo <= x && x <= row.ci_hi;
                out.horizons.push(HorizonDraw {
                    tau: row.tau,
                    estimate: row.estimate,
                    se: row.se,
                    covered: covers(truth),
                    realized_truth: realized,
                    covered_realized: covers(realized),
                });
            }
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    if let Some(pre) = &cfg.pretest {
        match pretest_panel(&draw.panel, pre, &cfg.study.estimation) {
            Ok(t) => out.pretest_p_value = Some(t.result.p_value),
            Err(e) => out.pretest_error = Some(e.to_string()),
        }
    }
    out
}

fn summarize(params: &DgpParams, cfg: &McConfig, outcomes: &[ReplicationOutcome]) -> Vec<McTauSummary> {
    let lo = -(cfg.study.k_pre as i64);
    let hi = cfg.study.tau_max as i64;
    (lo..=hi)
        .filter_map(|tau| {
            let draws: Vec<&HorizonDraw> = outcomes
                .iter()
                .filter(|o| o.error.is_none())
                .filter_map(|o| o.horizons.iter().find(|h| h.tau == tau))
                .collect();
            if draws.is_empty() {
                return None;
            }
            let k = draws.len() as f64;
            let mean = draws.iter().map(|d| d.estimate).sum::<f64>() / k;
            let sd = if draws.len() > 1 {
                (draws.iter().map(|d| (d.estimate - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            let share = |f: fn(&HorizonDraw) -> bool| draws.iter().filter(|d| f(d)).count() as f64 / k;
            Some(McTauSummary {
                tau,
                true_theta: event_time_truth(params, tau),
                mean_estimate: mean,
                sd_estimate: sd,
                mean_se: draws.iter().map(|d| d.se).sum::<f64>() / k,
                coverage: share(|d| d.covered),
                coverage_realized: share(|d| d.covered_realized),
                n: draws.len(),
            })
        })
        .collect()
}

/// Run `reps` replications. Replication `r` uses stream `r` of the seed, so
/// results do not depend on scheduling or on which other replications ran.
pub fn monte_carlo(params: &DgpParams, reps: usize, cfg: &McConfig) -> Result<McReport> {
    if reps == 0 {
        return Err(invalid("reps must be at least 1"));
    }
    params.validate()?;
    cfg.study.estimation.validate()?;
    let start = Instant::now();
    let run = || -> Vec<ReplicationOutcome> {
        (0..reps as u64)
            .into_par_iter()
            .map(|rep| run_replication(params, rep, cfg))
            .collect()
    };
    let outcomes = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| invalid(format!("cannot start worker pool: {e}")))?
            .install(run)
    } else {
        run()
    };
    for o in outcomes.iter().filter(|o| o.error.is_some()) {
        log::warn!(
            "replication {} failed: {}",
            o.rep,
            o.error.as_deref().unwrap_or("")
        );
    }
    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    let pvals: Vec<f64> = outcomes.iter().filter_map(|o| o.pretest_p_value).collect();
    let alpha = cfg.pretest.as_ref().map_or(0.05, |p| p.alpha);
    Ok(McReport {
        reps,
        failed_reps: failed,
        per_tau: summarize(params, cfg, &outcomes),
        pretest_non_rejection: (!pvals.is_empty())
            .then(|| pvals.iter().filter(|&&p| p >= alpha).count() as f64 / pvals.len() as f64),
        pretest_runs: pvals.len(),
        pretest_failures: outcomes.iter().filter(|o| o.pretest_error.is_some()).count(),
        seed: params.seed,
        runtime_secs: start.elapsed().as_secs_f64(),
        replications: outcomes,
    })
}

/// Defaults for desk-scale replication of the simulation study.
pub fn desk_scale() -> (DgpParams, McConfig) {
    let params = DgpParams {
        n: 5000,
        ..DgpParams::default()
    };
    let cfg = McConfig {
        study: EventStudyConfig {
            cohorts: CohortSpec::Each,
            ..EventStudyConfig::default()
        },
        ..McConfig::default()
    };
    (params, cfg)
}
