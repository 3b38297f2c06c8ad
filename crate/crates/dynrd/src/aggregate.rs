//! Cohort aggregation and event-study tables.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{select_bandwidths, BandwidthConfig, BandwidthPair};
use crate::data::{build_event_sample, make_level_vectors, make_rd_vectors, EventSample, Panel, RdVectors};
use crate::error::{invalid, Error, Result};
use crate::estimator::{estimate, normal_critical, RobustEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEstimate {
    pub cohort_id: String,
    pub g_periods: Vec<i64>,
    pub tau: i64,
    pub est: RobustEstimate,
    pub n_units: usize,
    /// Present when bandwidths were selected from the data.
    pub bandwidths: Option<BandwidthPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Shares of cohort sizes.
    #[default]
    Probability,
    Equal,
}

/// Size-proportional weights.
pub fn cohort_weights(counts: &BTreeMap<String, usize>, tau: i64) -> Result<BTreeMap<String, f64>> {
    weights_for(WeightScheme::Probability, counts, tau)
}

pub fn weights_for(
    scheme: WeightScheme,
    counts: &BTreeMap<String, usize>,
    tau: i64,
) -> Result<BTreeMap<String, f64>> {
    if counts.is_empty() {
        return Err(Error::NoCohorts { tau });
    }
    if counts.values().any(|&c| c == 0) {
        return Err(invalid("cohort counts must be positive"));
    }
    let total: usize = counts.values().sum();
    let k = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|(id, &c)| {
            let w = match scheme {
                WeightScheme::Probability => c as f64 / total as f64,
                WeightScheme::Equal => 1.0 / k,
            };
            (id.clone(), w)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub tau: i64,
    pub theta_agg: f64,
    pub se_agg: f64,
    pub ci: (f64, f64),
    pub weights: BTreeMap<String, f64>,
}

/// Fixed-weight combination of independent cohort estimates.
pub fn aggregate_tau(
    estimates: &[CohortEstimate],
    weights: &BTreeMap<String, f64>,
) -> Result<AggregateResult> {
    let first = estimates.first().ok_or_else(|| invalid("nothing to aggregate"))?;
    let tau = first.tau;
    if estimates.iter().any(|e| e.tau != tau) {
        return Err(invalid("estimates mix horizons"));
    }
    if estimates.len() != weights.len() {
        return Err(Error::KeyMismatch(format!(
            "{} estimates but {} weights",
            estimates.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.values().sum();
    if (total - 1.0).abs() > 1e-12 || weights.values().any(|&w| !(w >= 0.0)) {
        return Err(invalid("weights must be nonnegative and sum to one"));
    }
    let alpha = first.est.alpha;
    let (mut theta, mut var) = (0.0, 0.0);
    for e in estimates {
        let w = *weights
            .get(&e.cohort_id)
            .ok_or_else(|| Error::KeyMismatch(format!("no weight for cohort {}", e.cohort_id)))?;
        theta += w * e.est.theta_bc;
        var += w * w * e.est.v_bc;
    }
    let se = var.sqrt();
    let z = normal_critical(alpha)?;
    Ok(AggregateResult {
        tau,
        theta_agg: theta,
        se_agg: se,
        ci: (theta - z * se, theta + z * se),
        weights: weights.clone(),
    })
}

/// Which focal periods form each cohort.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortSpec {
    /// Every eligible focal period is its own cohort.
    #[default]
    Each,
    /// Explicit groups of focal periods pooled into one cohort each.
    Groups(Vec<Vec<i64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BandwidthMode {
    /// Plug-in selection per cohort and horizon.
    #[default]
    Auto,
    Fixed {
        h: f64,
        b: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnCohortError {
    /// Skip the cohort for that horizon and record a notice.
    #[default]
    Drop,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    pub alpha: f64,
    pub bandwidth: BandwidthMode,
    /// Kernel, neighbour count and selector tuning.
    pub selector: BandwidthConfig,
    pub weights: WeightScheme,
    pub on_cohort_error: OnCohortError,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            bandwidth: BandwidthMode::Auto,
            selector: BandwidthConfig::default(),
            weights: WeightScheme::Probability,
            on_cohort_error: OnCohortError::Drop,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        normal_critical(self.alpha)?;
        self.selector.validate()?;
        if let BandwidthMode::Fixed { h, b } = self.bandwidth {
            if !(h > 0.0 && b > 0.0 && h.is_finite() && b.is_finite()) {
                return Err(invalid("fixed bandwidths must be positive"));
            }
        }
        Ok(())
    }

    /// Select bandwidths if needed and estimate.
    pub fn run(&self, v: &RdVectors) -> Result<(RobustEstimate, Option<BandwidthPair>)> {
        let (h, b, chosen) = match self.bandwidth {
            BandwidthMode::Fixed { h, b } => (h, b, None),
            BandwidthMode::Auto => {
                let pair = select_bandwidths(v, &self.selector)?;
                (pair.h_mse, pair.b_mse, Some(pair))
            }
        };
        let est = estimate(v, h, b, &self.selector.kernel, &self.selector.nn, self.alpha)?;
        Ok((est, chosen))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventStudyConfig {
    /// Untreated periods required before the focal referendum.
    pub k: usize,
    /// Pre-periods estimated as placebos.
    pub k_pre: usize,
    pub tau_max: usize,
    pub cohorts: CohortSpec,
    pub estimation: EstimationConfig,
}

impl Default for EventStudyConfig {
    fn default() -> Self {
        Self {
            k: 3,
            k_pre: 3,
            tau_max: 5,
            cohorts: CohortSpec::Each,
            estimation: EstimationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStudyRow {
    pub tau: i64,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_units: usize,
    /// Weighted mean of cohort main bandwidths.
    pub h: f64,
    /// Weighted mean of cohort pilot bandwidths.
    pub b: f64,
    pub n_cohorts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStudy {
    pub rows: Vec<EventStudyRow>,
    pub aggregates: Vec<AggregateResult>,
    pub cohorts: Vec<CohortEstimate>,
    /// Cohorts skipped and why.
    pub notices: Vec<String>,
}

impl EventStudy {
    pub fn row(&self, tau: i64) -> Option<&EventStudyRow> {
        self.rows.iter().find(|r| r.tau == tau)
    }
}

fn cohort_label(periods: &[i64]) -> String {
    let parts: Vec<String> = periods.iter().map(i64::to_string).collect();
    format!("g{}", parts.join("+"))
}

/// Cohort sample for horizon `tau`, pooling the group's focal periods.
fn cohort_sample(panel: &Panel, periods: &[i64], cfg: &EventStudyConfig, tau: i64) -> Result<EventSample> {
    let horizon = tau.max(0) as usize;
    let parts = periods
        .iter()
        .map(|&g| build_event_sample(panel, g, cfg.k, horizon, cfg.k_pre))
        .collect::<Result<Vec<_>>>()?;
    let pooled = EventSample::pool(parts)?;
    let overlap = pooled.overlapping_units();
    if !overlap.is_empty() {
        log::info!(
            "cohort {}: {} unit(s) appear under several focal periods",
            cohort_label(periods),
            overlap.len()
        );
    }
    Ok(pooled)
}

fn horizon_vectors(sample: &EventSample, tau: i64) -> Result<RdVectors> {
    if tau >= 1 {
        make_rd_vectors(sample, tau as usize)
    } else {
        make_level_vectors(sample, tau)
    }
}

/// Focal periods whose window fits inside the panel for horizon `tau`.
fn eligible(panel: &Panel, g: i64, cfg: &EventStudyConfig, tau: i64) -> bool {
    let (t_min, t_max) = panel.period_range();
    g - cfg.k.max(cfg.k_pre) as i64 >= t_min && g + tau.max(0) <= t_max
}

/// Per-horizon cohort estimates aggregated into an event-study table.
/// Horizons run from `-k_pre` to `tau_max`; horizons up to zero use sharp
/// contrasts on the outcome at that event time.
pub fn event_study(panel: &Panel, cfg: &EventStudyConfig) -> Result<EventStudy> {
    cfg.estimation.validate()?;
    if cfg.k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let (t_min, t_max) = panel.period_range();
    let groups: Vec<Vec<i64>> = match &cfg.cohorts {
        CohortSpec::Each => (t_min..=t_max).map(|g| vec![g]).collect(),
        CohortSpec::Groups(groups) => {
            if groups.iter().any(Vec::is_empty) {
                return Err(invalid("cohort groups must be nonempty"));
            }
            groups.clone()
        }
    };

    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    let mut cohorts = Vec::new();
    let mut notices = Vec::new();

    for tau in -(cfg.k_pre as i64)..=cfg.tau_max as i64 {
        let active: Vec<&Vec<i64>> = groups
            .iter()
            .filter(|grp| grp.iter().all(|&g| eligible(panel, g, cfg, tau)))
            .collect();
        let results: Vec<(String, Result<CohortEstimate>)> = active
            .par_iter()
            .map(|grp| {
                let id = cohort_label(grp);
                let res = cohort_sample(panel, grp, cfg, tau).and_then(|sample| {
                    let v = horizon_vectors(&sample, tau)?;
                    let (est, bandwidths) = cfg.estimation.run(&v)?;
                    Ok(CohortEstimate {
                        cohort_id: id.clone(),
                        g_periods: grp.to_vec(),
                        tau,
                        est,
                        n_units: sample.len(),
                        bandwidths,
                    })
                });
                (id, res)
            })
            .collect();

        let mut kept = Vec::new();
        for (id, res) in results {
            match res {
                Ok(c) => kept.push(c),
                Err(e) if cfg.estimation.on_cohort_error == OnCohortError::Drop => {
                    log::info!("tau {tau}, cohort {id} dropped: {e}");
                    notices.push(format!("tau {tau}, cohort {id}: {e}"));
                }
                Err(e) => return Err(e),
            }
        }
        if kept.is_empty() {
            notices.push(format!("tau {tau}: no cohort could be estimated"));
            if cfg.estimation.on_cohort_error == OnCohortError::Fail {
                return Err(Error::NoCohorts { tau });
            }
            continue;
        }
        let counts: BTreeMap<String, usize> = kept.iter().map(|c| (c.cohort_id.clone(), c.n_units)).collect();
        let weights = weights_for(cfg.estimation.weights, &counts, tau)?;
        let agg = aggregate_tau(&kept, &weights)?;
        let mean_of = |f: fn(&RobustEstimate) -> f64| {
            kept.iter()
                .map(|c| weights[&c.cohort_id] * f(&c.est))
                .sum::<f64>()
        };
        rows.push(EventStudyRow {
            tau,
            estimate: agg.theta_agg,
            se: agg.se_agg,
            ci_lo: agg.ci.0,
            ci_hi: agg.ci.1,
            n_units: kept.iter().map(|c| c.n_units).sum(),
            h: mean_of(|e| e.h),
            b: mean_of(|e| e.b),
            n_cohorts: kept.len(),
        });
        aggregates.push(agg);
        cohorts.extend(kept);
    }
    if rows.is_empty() {
        return Err(Error::NoEstimates {
            dropped: notices.len(),
        });
    }
    Ok(EventStudy {
        rows,
        aggregates,
        cohorts,
        notices,
    })
}
