//! Direct plug-in MSE-optimal main and pilot bandwidths.

use serde::{Deserialize, Serialize};

use crate::data::RdVectors;
use crate::error::{invalid, Error, Result};
use crate::estimator::{nn_residuals, NnConfig, DENOM_TOL};
use crate::localpoly::{Kernel, KernelKind, KernelMoments, Side, SideDesign};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandwidthConfig {
    pub kernel: Kernel,
    pub nn: NnConfig,
    /// Minimum observations per side.
    pub min_per_side: usize,
    /// Bandwidths are capped at `fallback_ratio * range(R) / support`.
    pub fallback_ratio: f64,
    /// Share of each side, nearest the cutoff, averaged for variance proxies.
    pub near_fraction: f64,
    /// Selected bandwidths are widened until every side has this many
    /// observations with positive kernel weight.
    pub min_in_window: usize,
}

impl Default for BandwidthConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::triangular(),
            nn: NnConfig::default(),
            min_per_side: 50,
            fallback_ratio: 0.5,
            near_fraction: 0.2,
            min_in_window: 30,
        }
    }
}

impl BandwidthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_per_side < 6 {
            return Err(invalid(
                "min_per_side must be at least 6 for the order-5 pilot fits",
            ));
        }
        if !(self.fallback_ratio > 0.0 && self.fallback_ratio <= 1.0) {
            return Err(invalid("fallback_ratio must lie in (0, 1]"));
        }
        if !(self.near_fraction > 0.0 && self.near_fraction <= 1.0) {
            return Err(invalid("near_fraction must lie in (0, 1]"));
        }
        if self.min_in_window < 3 || self.min_in_window > self.min_per_side {
            return Err(invalid("min_in_window must lie between 3 and min_per_side"));
        }
        NnConfig::new(self.nn.j_star)?;
        Ok(())
    }
}

/// Preliminary quantities for one side. Variables are ordered (outcome, growth, never).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidePrelim {
    pub side: Side,
    pub n: usize,
    pub levels: [f64; 3],
    pub deriv2: [f64; 3],
    pub deriv3: [f64; 3],
    /// Nearest-neighbour second moments averaged near the cutoff.
    pub sigma: [[f64; 3]; 3],
}

impl SidePrelim {
    fn coefficients(&self) -> [f64; 3] {
        let [_, mu_w, mu_d] = self.levels;
        [1.0, 1.0 / mu_d, -mu_w / (mu_d * mu_d)]
    }

    fn combined_variance(&self) -> f64 {
        let c = self.coefficients();
        (0..3)
            .flat_map(|a| (0..3).map(move |b| (a, b)))
            .map(|(a, b)| c[a] * c[b] * self.sigma[a][b])
            .sum()
    }

    fn combined(&self, deriv: &[f64; 3]) -> f64 {
        self.coefficients().iter().zip(deriv).map(|(c, d)| c * d).sum()
    }
}

/// Everything the bandwidth rules consume. The assembled constants are kept
/// so the rules can be re-evaluated at a different `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginPrelim {
    pub n: usize,
    pub f_hat_c: f64,
    pub kde_bandwidth: f64,
    pub r_sd: f64,
    pub r_range: f64,
    pub above: SidePrelim,
    pub below: SidePrelim,
    pub kernel: Kernel,
    pub fallback_ratio: f64,
    pub v_dot_h: f64,
    pub b_dot_h: f64,
    pub reg_h: f64,
    pub v_dot_b: f64,
    pub b_dot_b: f64,
    pub reg_b: f64,
}

/// Gaussian kernel density estimate at zero with a normal-reference bandwidth.
pub fn density_at_cutoff(r: &[f64]) -> (f64, f64) {
    let n = r.len() as f64;
    let sd = std_dev(r);
    let bw = 1.06 * sd * n.powf(-0.2);
    let norm = 1.0 / (n * bw * (2.0 * std::f64::consts::PI).sqrt());
    let f = r.iter().map(|x| (-0.5 * (x / bw).powi(2)).exp()).sum::<f64>() * norm;
    (f, bw)
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Unweighted polynomial fit over an entire side.
fn global_design(r: &[f64], side: Side, p: usize) -> Result<SideDesign> {
    let reach = r
        .iter()
        .filter(|&&x| side.contains(x))
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let flat = Kernel::new(KernelKind::Uniform, 1.0)?;
    let h = if reach > 0.0 { reach * (1.0 + 1e-9) } else { 1.0 };
    SideDesign::new(r, side, p, h, &flat)
}

fn side_prelim(v: &RdVectors, side: Side, cfg: &BandwidthConfig) -> Result<SidePrelim> {
    let r = &v.running;
    let vars: [&[f64]; 3] = [&v.outcome, &v.growth, &v.never];
    let mut members: Vec<usize> = (0..r.len()).filter(|&i| side.contains(r[i])).collect();
    if members.len() < cfg.min_per_side {
        return Err(Error::InsufficientData {
            side,
            have: members.len(),
            need: cfg.min_per_side,
        });
    }
    let quartic = global_design(r, side, 4)?;
    let quintic = global_design(r, side, 5)?;
    let levels = vars.map(|a| quartic.intercept(a));
    let deriv2 = vars.map(|a| quartic.derivative(a, 2));
    let deriv3 = vars.map(|a| quintic.derivative(a, 3));
    if !(levels[2].abs() > DENOM_TOL) {
        return Err(Error::DegenerateDenominator {
            side,
            value: levels[2],
        });
    }

    members.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
    let res = nn_residuals(&vars, r, &members, side, &cfg.nn)?;
    let m = members.len();
    let near = ((cfg.near_fraction * m as f64).ceil() as usize).clamp(1, m);
    let range = match side {
        Side::Above => 0..near,
        Side::Below => m - near..m,
    };
    let scale = cfg.nn.j_star as f64 / (cfg.nn.j_star as f64 + 1.0);
    let mut sigma = [[0.0; 3]; 3];
    for (a, row) in sigma.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            let sum: f64 = range.clone().map(|k| res[a][k] * res[b][k]).sum();
            *cell = scale * sum / near as f64;
        }
    }
    Ok(SidePrelim {
        side,
        n: m,
        levels,
        deriv2,
        deriv3,
        sigma,
    })
}

pub fn plugin_prelim(v: &RdVectors, cfg: &BandwidthConfig) -> Result<PluginPrelim> {
    cfg.validate()?;
    let above = side_prelim(v, Side::Above, cfg)?;
    let below = side_prelim(v, Side::Below, cfg)?;
    let r = &v.running;
    let n = r.len();
    let (f_hat_c, kde_bandwidth) = density_at_cutoff(r);
    if !(f_hat_c > 0.0) {
        return Err(invalid("estimated density at the cutoff is not positive"));
    }
    let r_sd = std_dev(r);
    let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let linear = KernelMoments::new(&cfg.kernel, 1);
    let quadratic = KernelMoments::new(&cfg.kernel, 2);
    let bias_h = linear.bias_constant(0, 2);
    let bias_b = quadratic.bias_constant(2, 3);
    let spread = above.combined_variance() + below.combined_variance();
    let scale = (spread / 2.0).sqrt();
    let root_n = (n as f64).sqrt();

    Ok(PluginPrelim {
        n,
        f_hat_c,
        kde_bandwidth,
        r_sd,
        r_range: hi - lo,
        v_dot_h: spread / f_hat_c * linear.variance_constant(0),
        b_dot_h: bias_h * (above.combined(&above.deriv2) - below.combined(&below.deriv2)) / 2.0,
        reg_h: (bias_h * scale / r_sd.powi(2)).powi(2) / root_n,
        v_dot_b: spread / f_hat_c * quadratic.variance_constant(2),
        b_dot_b: bias_b * (above.combined(&above.deriv3) + below.combined(&below.deriv3)) / 6.0,
        reg_b: (bias_b * scale / r_sd.powi(3)).powi(2) / root_n,
        above,
        below,
        kernel: cfg.kernel,
        fallback_ratio: cfg.fallback_ratio,
    })
}

/// `(v / (4 b2))^(1/5) n^(-1/5)`.
pub fn h_mse_rule(v_dot: f64, b_dot_sq: f64, n: f64) -> f64 {
    (v_dot / (4.0 * b_dot_sq)).powf(0.2) * n.powf(-0.2)
}

/// `(5 v / (2 b2))^(1/7) n^(-1/7)`.
pub fn b_mse_rule(v_dot: f64, b_dot_sq: f64, n: f64) -> f64 {
    (5.0 * v_dot / (2.0 * b_dot_sq)).powf(1.0 / 7.0) * n.powf(-1.0 / 7.0)
}

/// How a bandwidth was arrived at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub value: f64,
    /// Value of the rule before the range guard.
    pub raw: f64,
    pub fallback: bool,
    pub truncated: bool,
    /// Set when the value was raised to reach the minimum window count.
    #[serde(default)]
    pub widened: bool,
}

impl RuleOutcome {
    fn widen(mut self, floor: f64) -> RuleOutcome {
        if self.value < floor {
            self.value = floor;
            self.widened = true;
        }
        self
    }
}

impl PluginPrelim {
    fn guard(&self) -> f64 {
        self.fallback_ratio * self.r_range / self.kernel.support
    }

    fn finish(&self, raw: f64, b_dot: f64, what: &str) -> RuleOutcome {
        let cap = self.guard();
        if b_dot.abs() < 1e-10 {
            log::warn!("{what}: bias constant vanishes, using range-based fallback {cap}");
            return RuleOutcome {
                value: cap,
                raw,
                fallback: true,
                truncated: false,
                widened: false,
            };
        }
        if raw > cap || !raw.is_finite() {
            log::warn!("{what}: {raw} exceeds the support guard, truncated to {cap}");
            return RuleOutcome {
                value: cap,
                raw,
                fallback: false,
                truncated: true,
                widened: false,
            };
        }
        RuleOutcome {
            value: raw,
            raw,
            fallback: false,
            truncated: false,
            widened: false,
        }
    }

    pub fn h_rule(&self) -> RuleOutcome {
        let raw = h_mse_rule(self.v_dot_h, self.b_dot_h.powi(2) + self.reg_h, self.n as f64);
        self.finish(raw, self.b_dot_h, "main bandwidth")
    }

    pub fn b_rule(&self) -> RuleOutcome {
        let raw = b_mse_rule(self.v_dot_b, self.b_dot_b.powi(2) + self.reg_b, self.n as f64);
        self.finish(raw, self.b_dot_b, "pilot bandwidth")
    }
}

pub fn select_h_mse(prelim: &PluginPrelim) -> f64 {
    prelim.h_rule().value
}

pub fn select_b_mse(prelim: &PluginPrelim) -> f64 {
    prelim.b_rule().value
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthPair {
    pub h_mse: f64,
    pub b_mse: f64,
    pub h_rule: RuleOutcome,
    pub b_rule: RuleOutcome,
    pub diagnostics: PluginPrelim,
}

/// Smallest bandwidth giving each side at least `count` observations with
/// positive kernel weight.
pub fn window_floor(r: &[f64], count: usize, kernel: &Kernel) -> f64 {
    Side::BOTH
        .iter()
        .map(|&side| {
            let mut dist: Vec<f64> = r.iter().filter(|&&x| side.contains(x)).map(|x| x.abs()).collect();
            if dist.len() < count || count == 0 {
                return 0.0;
            }
            let (_, kth, _) = dist.select_nth_unstable_by(count - 1, f64::total_cmp);
            *kth * (1.0 + 1e-9) / kernel.support
        })
        .fold(0.0, f64::max)
}

pub fn select_bandwidths(v: &RdVectors, cfg: &BandwidthConfig) -> Result<BandwidthPair> {
    let prelim = plugin_prelim(v, cfg)?;
    let floor = window_floor(&v.running, cfg.min_in_window, &cfg.kernel);
    let h_rule = prelim.h_rule().widen(floor);
    let b_rule = prelim.b_rule().widen(floor);
    Ok(BandwidthPair {
        h_mse: h_rule.value,
        b_mse: b_rule.value,
        h_rule,
        b_rule,
        diagnostics: prelim,
    })
}
