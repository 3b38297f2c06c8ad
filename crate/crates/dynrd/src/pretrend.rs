//! Common-trends pre-test.
//!
//! On each side of the cutoff, compare the limit of the pre-period outcome
//! change among units that stay untreated over the horizon with the same
//! limit among units that do not, then combine both sides into a Wald
//! statistic with two degrees of freedom.

use serde::{Deserialize, Serialize};

use crate::aggregate::{BandwidthMode, EstimationConfig};
use crate::bandwidth::{select_bandwidths, BandwidthPair};
use crate::data::{
    build_event_sample, make_pretrend_vectors, make_rd_vectors, EventSample, Panel, PretrendVectors,
};
use crate::error::{invalid, Error, Result};
use crate::estimator::{clamp_variance, NnConfig, SideFit, DENOM_TOL};
use crate::localpoly::{Kernel, Side};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SidePretrend {
    pub side: Side,
    /// Difference in trend limits before bias correction.
    pub pi_hat: f64,
    pub bias_hat: f64,
    pub pi_bc: f64,
    pub v_bc: f64,
    pub h: f64,
    pub b: f64,
    pub n_eff: usize,
    /// Fitted share of units staying untreated over the horizon.
    pub never_share: f64,
    /// Fitted share of the complement.
    pub ever_share: f64,
}

impl SidePretrend {
    pub fn z(&self) -> f64 {
        self.pi_bc / self.v_bc.sqrt()
    }
}

fn checked_group(side: Side, group: &'static str, value: f64) -> Result<f64> {
    if !(value.abs() > DENOM_TOL) {
        return Err(Error::DegenerateGroup { side, group, value });
    }
    Ok(value)
}

pub fn pretrend_side(
    v: &PretrendVectors,
    side: Side,
    h: f64,
    b: f64,
    kernel: &Kernel,
    cfg: &NnConfig,
) -> Result<SidePretrend> {
    let fit = SideFit::new(&v.running, side, h, b, kernel)?;
    let never_share = checked_group(side, "never treated", fit.level(&v.never))?;
    let ever_share = checked_group(side, "treated later", fit.level(&v.ever))?;
    let never_trend = fit.level(&v.never_trend);
    let ever_trend = fit.level(&v.ever_trend);

    let vars: [&[f64]; 4] = [&v.never_trend, &v.never, &v.ever_trend, &v.ever];
    let coef = [
        1.0 / never_share,
        -never_trend / never_share.powi(2),
        -1.0 / ever_share,
        ever_trend / ever_share.powi(2),
    ];
    let pi_hat = never_trend / never_share - ever_trend / ever_share;
    let bias_hat = fit.bias(&vars, &coef);
    let (v_bc, _) = clamp_variance(fit.variance(&vars, &coef, cfg)?)?;
    Ok(SidePretrend {
        side,
        pi_hat,
        bias_hat,
        pi_bc: pi_hat - h * h * bias_hat,
        v_bc,
        h,
        b,
        n_eff: fit.n_eff(),
        never_share,
        ever_share,
    })
}

/// Survival function of the chi-square distribution with two degrees of freedom.
pub fn chi2_2df_sf(stat: f64) -> f64 {
    (-stat / 2.0).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrendResult {
    /// Earlier pre-period lag.
    #[serde(rename = "u")]
    pub far_lag: usize,
    /// Later pre-period lag.
    #[serde(rename = "v")]
    pub near_lag: usize,
    pub pi_plus: f64,
    pub pi_minus: f64,
    pub v_plus: f64,
    pub v_minus: f64,
    pub se_plus: f64,
    pub se_minus: f64,
    pub stat: f64,
    pub p_value: f64,
    pub method: String,
}

impl PretrendResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

pub fn joint_test(
    above: &SidePretrend,
    below: &SidePretrend,
    far_lag: usize,
    near_lag: usize,
) -> Result<PretrendResult> {
    if above.side != Side::Above || below.side != Side::Below {
        return Err(invalid("joint test needs one result per side"));
    }
    for s in [above, below] {
        if !(s.v_bc > 0.0) {
            return Err(Error::NegativeVariance(s.v_bc));
        }
    }
    let stat = above.z().powi(2) + below.z().powi(2);
    Ok(PretrendResult {
        far_lag,
        near_lag,
        pi_plus: above.pi_bc,
        pi_minus: below.pi_bc,
        v_plus: above.v_bc,
        v_minus: below.v_bc,
        se_plus: above.v_bc.sqrt(),
        se_minus: below.v_bc.sqrt(),
        stat,
        p_value: chi2_2df_sf(stat),
        method: "wald_chi2_2df".into(),
    })
}

/// Both sides plus the joint statistic.
pub fn pretrend_test(
    v: &PretrendVectors,
    far_lag: usize,
    near_lag: usize,
    h: f64,
    b: f64,
    kernel: &Kernel,
    cfg: &NnConfig,
) -> Result<PretrendResult> {
    let above = pretrend_side(v, Side::Above, h, b, kernel, cfg)?;
    let below = pretrend_side(v, Side::Below, h, b, kernel, cfg)?;
    joint_test(&above, &below, far_lag, near_lag)
}

/// Settings for running the pre-test directly on a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretestConfig {
    /// Untreated periods required before the focal referendum.
    pub k: usize,
    pub far_lag: usize,
    pub near_lag: usize,
    /// Post-period horizon defining the two path groups.
    pub horizon: usize,
    /// Focal periods to pool; every eligible period when absent.
    pub focal: Option<Vec<i64>>,
    pub alpha: f64,
}

impl Default for PretestConfig {
    fn default() -> Self {
        Self {
            k: 3,
            far_lag: 3,
            near_lag: 1,
            horizon: 5,
            focal: None,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelPretest {
    pub result: PretrendResult,
    pub above: SidePretrend,
    pub below: SidePretrend,
    pub focal_periods: Vec<i64>,
    pub n_units: usize,
    pub bandwidths: Option<BandwidthPair>,
}

/// Pool the cohorts of the eligible focal periods and run the joint test.
/// Automatic bandwidths are those selected for the one-period-ahead estimate
/// on the pooled sample.
pub fn pretest_panel(
    panel: &Panel,
    cfg: &PretestConfig,
    estimation: &EstimationConfig,
) -> Result<PanelPretest> {
    estimation.validate()?;
    if cfg.horizon == 0 {
        return Err(invalid("pre-test horizon must be at least 1"));
    }
    let (t_min, t_max) = panel.period_range();
    let back = cfg.k.max(cfg.far_lag) as i64;
    let candidates: Vec<i64> = match &cfg.focal {
        Some(list) => list.clone(),
        None => (t_min + back..=t_max - cfg.horizon as i64).collect(),
    };
    let mut parts = Vec::new();
    for g in candidates {
        match build_event_sample(panel, g, cfg.k, cfg.horizon, cfg.far_lag) {
            Ok(s) => parts.push(s),
            Err(Error::EmptyCohort { .. }) if cfg.focal.is_none() => {}
            Err(e) => return Err(e),
        }
    }
    let pooled = EventSample::pool(parts)?;
    let (h, b, bandwidths) = match estimation.bandwidth {
        BandwidthMode::Fixed { h, b } => (h, b, None),
        BandwidthMode::Auto => {
            let pair = select_bandwidths(&make_rd_vectors(&pooled, 1)?, &estimation.selector)?;
            (pair.h_mse, pair.b_mse, Some(pair))
        }
    };
    let vectors = make_pretrend_vectors(&pooled, cfg.far_lag, cfg.near_lag, cfg.horizon)?;
    let kernel = &estimation.selector.kernel;
    let nn = &estimation.selector.nn;
    let above = pretrend_side(&vectors, Side::Above, h, b, kernel, nn)?;
    let below = pretrend_side(&vectors, Side::Below, h, b, kernel, nn)?;
    Ok(PanelPretest {
        result: joint_test(&above, &below, cfg.far_lag, cfg.near_lag)?,
        above,
        below,
        focal_periods: pooled.focal_periods.clone(),
        n_units: pooled.len(),
        bandwidths,
    })
}
