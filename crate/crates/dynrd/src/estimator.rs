//! Dynamic treatment-effect estimator with robust bias-corrected inference.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::RdVectors;
use crate::error::{invalid, Error, Result};
use crate::localpoly::{Kernel, Side, SideDesign};

/// Smallest admissible magnitude of a fitted selection share.
pub const DENOM_TOL: f64 = 1e-6;

/// Slack for a fitted share to leave `[0, 1]` before it is flagged.
const SHARE_SLACK: f64 = 1e-8;

/// Assembled variances in `[-NEG_VAR_TOL, 0)` are treated as rounding noise.
const NEG_VAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NnConfig {
    pub j_star: usize,
}

impl Default for NnConfig {
    fn default() -> Self {
        Self { j_star: 3 }
    }
}

impl NnConfig {
    pub fn new(j_star: usize) -> Result<Self> {
        if j_star == 0 {
            return Err(invalid("j_star must be at least 1"));
        }
        Ok(Self { j_star })
    }
}

/// Plain sharp contrast of one-sided intercepts.
pub fn sharp_rd(r: &[f64], a: &[f64], h: f64, p: usize, kernel: &Kernel) -> Result<f64> {
    if a.len() != r.len() {
        return Err(invalid("outcome and margin vectors differ in length"));
    }
    let above = SideDesign::new(r, Side::Above, p, h, kernel)?.intercept(a);
    let below = SideDesign::new(r, Side::Below, p, h, kernel)?.intercept(a);
    Ok(above - below)
}

/// Neighbour residuals for observations `members` (sorted by margin).
/// Returns one residual vector per input variable, aligned with `members`.
pub(crate) fn nn_residuals(
    vars: &[&[f64]],
    r: &[f64],
    members: &[usize],
    side: Side,
    cfg: &NnConfig,
) -> Result<Vec<Vec<f64>>> {
    let j = cfg.j_star;
    if j == 0 {
        return Err(invalid("j_star must be at least 1"));
    }
    let m = members.len();
    if m < j + 1 {
        return Err(Error::InsufficientNeighbors {
            side,
            have: m,
            need: j + 1,
        });
    }
    let mut out = vec![Vec::with_capacity(m); vars.len()];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(2 * j + 2);
    for pos in 0..m {
        let ri = r[members[pos]];
        let dist = |q: usize| (r[members[q]] - ri).abs();
        cand.clear();
        let (mut lo, mut hi) = (pos, pos + 1);
        let mut last = f64::NEG_INFINITY;
        loop {
            let left = (lo > 0).then(|| dist(lo - 1));
            let right = (hi < m).then(|| dist(hi));
            let take_left = match (left, right) {
                (Some(l), Some(rt)) => l <= rt,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            let d = if take_left { left.unwrap() } else { right.unwrap() };
            if cand.len() >= j && d > last {
                break;
            }
            if take_left {
                lo -= 1;
                cand.push((d, members[lo]));
            } else {
                cand.push((d, members[hi]));
                hi += 1;
            }
            last = d;
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let i = members[pos];
        for (slot, var) in out.iter_mut().zip(vars) {
            let mean = cand[..j].iter().map(|&(_, q)| var[q]).sum::<f64>() / j as f64;
            slot.push(var[i] - mean);
        }
    }
    Ok(out)
}

/// Per-observation nearest-neighbour cross moments; zero off `side`.
pub fn nn_cov(a: &[f64], b: &[f64], r: &[f64], side: Side, cfg: &NnConfig) -> Result<Vec<f64>> {
    if a.len() != r.len() || b.len() != r.len() {
        return Err(invalid("vectors differ in length"));
    }
    let mut members: Vec<usize> = (0..r.len()).filter(|&i| side.contains(r[i])).collect();
    members.sort_by(|&x, &y| r[x].total_cmp(&r[y]).then(x.cmp(&y)));
    let res = nn_residuals(&[a, b], r, &members, side, cfg)?;
    let scale = cfg.j_star as f64 / (cfg.j_star as f64 + 1.0);
    let mut out = vec![0.0; r.len()];
    for (k, &i) in members.iter().enumerate() {
        out[i] = scale * res[0][k] * res[1][k];
    }
    Ok(out)
}

/// Local linear levels at `h` and local quadratic curvature at `b` on one
/// side, the ingredients of every smooth functional of one-sided limits.
#[derive(Debug, Clone)]
pub(crate) struct SideFit<'a> {
    r: &'a [f64],
    pub side: Side,
    pub h: f64,
    pub b: f64,
    level: SideDesign,
    curve: SideDesign,
}

impl<'a> SideFit<'a> {
    pub fn new(r: &'a [f64], side: Side, h: f64, b: f64, kernel: &Kernel) -> Result<Self> {
        Ok(Self {
            r,
            side,
            h,
            b,
            level: SideDesign::new(r, side, 1, h, kernel)?,
            curve: SideDesign::new(r, side, 2, b, kernel)?,
        })
    }

    pub fn n_eff(&self) -> usize {
        self.level.n_eff()
    }

    pub fn level(&self, a: &[f64]) -> f64 {
        self.level.intercept(a)
    }

    pub fn curvature(&self, a: &[f64]) -> f64 {
        self.curve.derivative(a, 2)
    }

    pub fn bias_factor(&self) -> f64 {
        self.level.bias_factor(0, 2)
    }

    /// Leading bias of `sum coef_A mu_A` divided by `h^2`.
    pub fn bias(&self, vars: &[&[f64]], coef: &[f64]) -> f64 {
        let curv: f64 = vars.iter().zip(coef).map(|(a, c)| c * self.curvature(a)).sum();
        curv / 2.0 * self.bias_factor()
    }

    /// Variance of the bias-corrected linearised functional `sum coef_A mu_A`
    /// with nearest-neighbour moments from the estimation window.
    pub fn variance(&self, vars: &[&[f64]], coef: &[f64], nn: &NnConfig) -> Result<f64> {
        let window = if self.b >= self.h {
            &self.curve.idx
        } else {
            &self.level.idx
        };
        let res = nn_residuals(vars, self.r, window, self.side, nn)?;
        let scale = nn.j_star as f64 / (nn.j_star as f64 + 1.0);
        let mut sigma = vec![0.0; self.r.len()];
        for (k, &i) in window.iter().enumerate() {
            let e: f64 = res.iter().zip(coef).map(|(e, c)| c * e[k]).sum();
            sigma[i] = scale * e * e;
        }

        let n = self.r.len() as f64;
        let (h, b) = (self.h, self.b);
        let s0 = self.level.selector(0);
        let s2 = self.curve.selector(2);
        let quad =
            |x: &DVector<f64>, m: &nalgebra::DMatrix<f64>, y: &DVector<f64>| (x.transpose() * m * y)[(0, 0)];
        let v_level = quad(&s0, &self.level.psi(&self.level, self.r, &sigma), &s0) / n;
        let v_curve = 4.0 / (n * b.powi(4)) * quad(&s2, &self.curve.psi(&self.curve, self.r, &sigma), &s2);
        let cov = 2.0 / (n * b * b) * quad(&s0, &self.level.psi(&self.curve, self.r, &sigma), &s2);

        let bf = self.bias_factor();
        Ok(v_level + h.powi(4) * bf * bf / 4.0 * v_curve - 2.0 * h * h * bf / 2.0 * cov)
    }
}

/// Fitted one-sided quantities entering the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideMoments {
    pub side: Side,
    pub mu_y: f64,
    pub mu_w: f64,
    pub mu_d: f64,
    pub mu2_y: f64,
    pub mu2_w: f64,
    pub mu2_d: f64,
    pub bias_factor: f64,
    /// False when the fitted share strays outside `[0, 1]`.
    pub mu_d_in_range: bool,
}

impl SideMoments {
    /// Linearisation weights on (outcome, growth, never).
    pub fn coefficients(&self) -> [f64; 3] {
        [1.0, 1.0 / self.mu_d, -self.mu_w / (self.mu_d * self.mu_d)]
    }

    pub fn bias(&self) -> f64 {
        let [cy, cw, cd] = self.coefficients();
        (cy * self.mu2_y + cw * self.mu2_w + cd * self.mu2_d) / 2.0 * self.bias_factor
    }
}

fn vars(v: &RdVectors) -> [&[f64]; 3] {
    [&v.outcome, &v.growth, &v.never]
}

fn checked_share(side: Side, mu_d: f64) -> Result<f64> {
    if !(mu_d.abs() > DENOM_TOL) {
        return Err(Error::DegenerateDenominator { side, value: mu_d });
    }
    Ok(mu_d)
}

pub fn side_moments(v: &RdVectors, side: Side, h: f64, b: f64, kernel: &Kernel) -> Result<SideMoments> {
    let fit = SideFit::new(&v.running, side, h, b, kernel)?;
    moments_from(&fit, v)
}

fn moments_from(fit: &SideFit<'_>, v: &RdVectors) -> Result<SideMoments> {
    let mu_d = checked_share(fit.side, fit.level(&v.never))?;
    let mu_d_in_range = (-SHARE_SLACK..=1.0 + SHARE_SLACK).contains(&mu_d);
    if !mu_d_in_range {
        log::warn!(
            "{} side: fitted never-treated share {mu_d} outside [0, 1]",
            fit.side
        );
    }
    Ok(SideMoments {
        side: fit.side,
        mu_y: fit.level(&v.outcome),
        mu_w: fit.level(&v.growth),
        mu_d,
        mu2_y: fit.curvature(&v.outcome),
        mu2_w: fit.curvature(&v.growth),
        mu2_d: fit.curvature(&v.never),
        bias_factor: fit.bias_factor(),
        mu_d_in_range,
    })
}

fn side_point(v: &RdVectors, side: Side, h: f64, kernel: &Kernel) -> Result<(f64, f64)> {
    let design = SideDesign::new(&v.running, side, 1, h, kernel)?;
    let mu_d = checked_share(side, design.intercept(&v.never))?;
    Ok((design.intercept(&v.outcome), design.intercept(&v.growth) / mu_d))
}

/// Point estimate of the dynamic effect at horizon `v.tau`.
pub fn adte_point(v: &RdVectors, h: f64, kernel: &Kernel) -> Result<f64> {
    let (y_above, ratio_above) = side_point(v, Side::Above, h, kernel)?;
    let (y_below, ratio_below) = side_point(v, Side::Below, h, kernel)?;
    Ok((y_above - y_below) + (ratio_above - ratio_below))
}

/// Leading bias divided by `h^2`, above minus below.
pub fn bias_estimate(v: &RdVectors, h: f64, b: f64, kernel: &Kernel) -> Result<f64> {
    let above = side_moments(v, Side::Above, h, b, kernel)?;
    let below = side_moments(v, Side::Below, h, b, kernel)?;
    Ok(above.bias() - below.bias())
}

/// Variance of the bias-corrected estimate, clamping rounding-level negatives.
pub fn robust_variance(v: &RdVectors, h: f64, b: f64, kernel: &Kernel, cfg: &NnConfig) -> Result<f64> {
    let mut total = 0.0;
    for side in Side::BOTH {
        let fit = SideFit::new(&v.running, side, h, b, kernel)?;
        let m = moments_from(&fit, v)?;
        total += fit.variance(&vars(v), &m.coefficients(), cfg)?;
    }
    Ok(clamp_variance(total)?.0)
}

/// Returns the variance and whether it was clamped.
pub(crate) fn clamp_variance(v: f64) -> Result<(f64, bool)> {
    if v.is_nan() || v < -NEG_VAR_TOL {
        return Err(Error::NegativeVariance(v));
    }
    if v < 0.0 {
        log::warn!("assembled variance {v:e} clamped to zero");
        return Ok((0.0, true));
    }
    Ok((v, false))
}

/// Two-sided normal critical value for level `alpha`.
pub fn normal_critical(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if alpha == 1.0 {
        return Ok(0.0);
    }
    let std_normal = Normal::standard();
    Ok(std_normal.inverse_cdf(1.0 - alpha / 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustEstimate {
    pub theta_hat: f64,
    pub bias_hat: f64,
    pub theta_bc: f64,
    pub v_bc: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    pub h: f64,
    pub b: f64,
    pub n_above: usize,
    pub n_below: usize,
    /// Set when a rounding-level negative variance was clamped to zero.
    pub variance_clamped: bool,
    pub above: SideMoments,
    pub below: SideMoments,
}

impl RobustEstimate {
    pub fn covers(&self, value: f64) -> bool {
        self.ci.0 <= value && value <= self.ci.1
    }
}

pub fn estimate(
    v: &RdVectors,
    h: f64,
    b: f64,
    kernel: &Kernel,
    cfg: &NnConfig,
    alpha: f64,
) -> Result<RobustEstimate> {
    let z = normal_critical(alpha)?;
    let theta_hat = adte_point(v, h, kernel)?;
    let fit_above = SideFit::new(&v.running, Side::Above, h, b, kernel)?;
    let fit_below = SideFit::new(&v.running, Side::Below, h, b, kernel)?;
    let above = moments_from(&fit_above, v)?;
    let below = moments_from(&fit_below, v)?;
    let bias_hat = above.bias() - below.bias();
    let raw = fit_above.variance(&vars(v), &above.coefficients(), cfg)?
        + fit_below.variance(&vars(v), &below.coefficients(), cfg)?;
    let (v_bc, variance_clamped) = clamp_variance(raw)?;
    let theta_bc = theta_hat - h * h * bias_hat;
    let se = v_bc.sqrt();
    Ok(RobustEstimate {
        theta_hat,
        bias_hat,
        theta_bc,
        v_bc,
        se,
        ci: (theta_bc - z * se, theta_bc + z * se),
        alpha,
        h,
        b,
        n_above: fit_above.n_eff(),
        n_below: fit_below.n_eff(),
        variance_clamped,
        above,
        below,
    })
}
