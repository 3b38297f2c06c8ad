//! One-sided kernel-weighted local polynomial regression.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Side of the cutoff. A centred margin of exactly zero is on the `Above` side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Above,
    Below,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Above, Side::Below];

    pub fn contains(self, r: f64) -> bool {
        match self {
            Side::Above => r >= 0.0,
            Side::Below => r < 0.0,
        }
    }

    /// +1 above, -1 below.
    pub fn sign(self) -> f64 {
        match self {
            Side::Above => 1.0,
            Side::Below => -1.0,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Above => "above",
            Side::Below => "below",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Triangular,
    Uniform,
    Epanechnikov,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "triangular" | "tri" => Ok(Self::Triangular),
            "uniform" | "rectangular" => Ok(Self::Uniform),
            "epanechnikov" | "epa" => Ok(Self::Epanechnikov),
            other => Err(invalid(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Symmetric kernel with support `[-support, support]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    pub support: f64,
}

impl Default for Kernel {
    fn default() -> Self {
        Self::triangular()
    }
}

impl Kernel {
    pub fn new(kind: KernelKind, support: f64) -> Result<Self> {
        if !(support.is_finite() && support > 0.0) {
            return Err(invalid("kernel support must be positive and finite"));
        }
        Ok(Self { kind, support })
    }

    pub fn triangular() -> Self {
        Self {
            kind: KernelKind::Triangular,
            support: 1.0,
        }
    }

    /// k(|u|); zero outside the support.
    pub fn eval(&self, u: f64) -> f64 {
        let x = u.abs() / self.support;
        if x > 1.0 {
            return 0.0;
        }
        let base = match self.kind {
            KernelKind::Triangular => 1.0 - x,
            KernelKind::Uniform => 0.5,
            KernelKind::Epanechnikov => 0.75 * (1.0 - x * x),
        };
        base / self.support
    }

    /// k(r/h)/h.
    pub fn weight(&self, r: f64, h: f64) -> Result<f64> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(invalid(format!("bandwidth must be positive, got {h}")));
        }
        Ok(self.eval(r / h) / h)
    }

    /// Integral of `f(u)·k(u)^power` over `[0, support]`.
    pub fn integrate(&self, power: i32, f: impl Fn(f64) -> f64) -> f64 {
        let half = self.support / 2.0;
        gauss_legendre()
            .iter()
            .map(|&(x, w)| {
                let u = half * (x + 1.0);
                w * f(u) * self.eval(u).powi(power)
            })
            .sum::<f64>()
            * half
    }
}

pub fn kernel_weight(kernel: &Kernel, u: f64, h: f64) -> Result<f64> {
    kernel.weight(u, h)
}

const GL_NODES: usize = 24;

/// Gauss–Legendre nodes and weights on [-1, 1], exact for polynomials of degree < 48.
fn gauss_legendre() -> &'static [(f64, f64)] {
    use std::sync::OnceLock;
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_NODES;
        (0..n)
            .map(|i| {
                let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for j in 2..=n {
                        let j = j as f64;
                        let p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let step = p1 / dp;
                    x -= step;
                    if step.abs() < 1e-16 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    })
}

/// Powers `(1, u, ..., u^p)`.
pub(crate) fn powers(u: f64, p: usize) -> impl Iterator<Item = f64> {
    std::iter::successors(Some(1.0), move |x| Some(x * u)).take(p + 1)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Relative pivot size below which the weighted design counts as rank deficient.
const RANK_TOL: f64 = 1e-11;

/// Kernel-weighted design for one side, order and bandwidth, factorised once
/// so several outcomes can be fitted against it.
#[derive(Debug, Clone)]
pub(crate) struct SideDesign {
    pub p: usize,
    pub h: f64,
    pub kernel: Kernel,
    /// Length of the full sample; every matrix is scaled by `1/n_total`.
    pub n_total: usize,
    /// Indices with positive weight, ordered by (margin, index).
    pub idx: Vec<usize>,
    /// Scaled margins `r/h` for `idx`.
    pub u: Vec<f64>,
    /// Kernel weights `k_h(r)` for `idx`.
    pub w: Vec<f64>,
    q: DMatrix<f64>,
    r_factor: DMatrix<f64>,
}

impl SideDesign {
    pub fn new(r: &[f64], side: Side, p: usize, h: f64, kernel: &Kernel) -> Result<Self> {
        kernel.weight(0.0, h)?;
        let mut idx: Vec<usize> = (0..r.len())
            .filter(|&i| side.contains(r[i]) && kernel.eval(r[i] / h) > 0.0)
            .collect();
        idx.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
        let u: Vec<f64> = idx.iter().map(|&i| r[i] / h).collect();
        let w: Vec<f64> = u.iter().map(|&x| kernel.eval(x) / h).collect();
        let n_total = r.len();
        let m = idx.len();
        let cols = p + 1;
        if m < cols {
            return Err(Error::SingularFit {
                side,
                order: p,
                n_eff: m,
                condition: f64::INFINITY,
            });
        }
        let scale = 1.0 / n_total as f64;
        let mut x = DMatrix::zeros(m, cols);
        for (row, (&ui, &wi)) in u.iter().zip(&w).enumerate() {
            let s = (wi * scale).sqrt();
            for (j, pw) in powers(ui, p).enumerate() {
                x[(row, j)] = s * pw;
            }
        }
        let qr = x.qr();
        let r_factor = qr.r();
        let diag: Vec<f64> = (0..cols).map(|j| r_factor[(j, j)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > RANK_TOL * max) {
            return Err(Error::SingularFit {
                side,
                order: p,
                n_eff: m,
                condition: if min > 0.0 { max / min } else { f64::INFINITY },
            });
        }
        Ok(Self {
            p,
            h,
            kernel: *kernel,
            n_total,
            idx,
            u,
            w,
            q: qr.q(),
            r_factor,
        })
    }

    pub fn n_eff(&self) -> usize {
        self.idx.len()
    }

    /// Least-squares coefficients in units of `r/h`.
    pub fn scaled_coefficients(&self, a: &[f64]) -> DVector<f64> {
        let scale = 1.0 / self.n_total as f64;
        let rhs = DVector::from_iterator(
            self.idx.len(),
            self.idx
                .iter()
                .zip(&self.w)
                .map(|(&i, &wi)| (wi * scale).sqrt() * a[i]),
        );
        let qty = self.q.tr_mul(&rhs);
        self.r_factor
            .solve_upper_triangular(&qty)
            .expect("pivots checked at construction")
    }

    /// Coefficients on powers of the centred margin.
    pub fn coefficients(&self, a: &[f64]) -> Vec<f64> {
        self.scaled_coefficients(a)
            .iter()
            .zip(powers(1.0 / self.h, self.p))
            .map(|(b, s)| b * s)
            .collect()
    }

    /// Estimate of the `nu`-th derivative at the cutoff.
    pub fn derivative(&self, a: &[f64], nu: usize) -> f64 {
        factorial(nu) * self.coefficients(a)[nu]
    }

    pub fn intercept(&self, a: &[f64]) -> f64 {
        self.scaled_coefficients(a)[0]
    }

    pub fn gamma(&self) -> DMatrix<f64> {
        self.r_factor.tr_mul(&self.r_factor)
    }

    /// Solve `gamma * x = rhs`.
    pub fn gamma_solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let y = self
            .r_factor
            .tr_solve_upper_triangular(rhs)
            .expect("pivots checked at construction");
        self.r_factor
            .solve_upper_triangular(&y)
            .expect("pivots checked at construction")
    }

    pub fn vartheta(&self, q_power: i32) -> DVector<f64> {
        let mut out = DVector::zeros(self.p + 1);
        for (&ui, &wi) in self.u.iter().zip(&self.w) {
            let base = wi * ui.powi(q_power);
            for (j, pw) in powers(ui, self.p).enumerate() {
                out[j] += base * pw;
            }
        }
        out / self.n_total as f64
    }

    /// `nu! e_nu' gamma^{-1} vartheta_q`.
    pub fn bias_factor(&self, nu: usize, q_power: i32) -> f64 {
        factorial(nu) * self.gamma_solve(&self.vartheta(q_power))[nu]
    }

    /// `e_nu' gamma^{-1}`, the row mapping `X'Z a / n` onto the scaled coefficient `nu`.
    pub fn selector(&self, nu: usize) -> DVector<f64> {
        let mut e = DVector::zeros(self.p + 1);
        e[nu] = 1.0;
        self.gamma_solve(&e)
    }

    /// Sandwich middle `X_self' Z_self diag(sigma) Z_other X_other / n`.
    pub fn psi(&self, other: &SideDesign, r: &[f64], sigma: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.p + 1, other.p + 1);
        let mut xs = vec![0.0; self.p + 1];
        let mut xo = vec![0.0; other.p + 1];
        for ((&i, &ui), &wi) in self.idx.iter().zip(&self.u).zip(&self.w) {
            let s = sigma[i];
            if s == 0.0 {
                continue;
            }
            let uo = r[i] / other.h;
            let wo = other.kernel.eval(uo) / other.h;
            if wo == 0.0 {
                continue;
            }
            for (slot, pw) in xs.iter_mut().zip(powers(ui, self.p)) {
                *slot = pw;
            }
            for (slot, pw) in xo.iter_mut().zip(powers(uo, other.p)) {
                *slot = pw;
            }
            let c = wi * wo * s;
            for (a, xa) in xs.iter().enumerate() {
                for (b, xb) in xo.iter().enumerate() {
                    out[(a, b)] += c * xa * xb;
                }
            }
        }
        out / self.n_total as f64
    }
}

/// Result of a one-sided local polynomial fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPolyFit {
    pub side: Side,
    pub p: usize,
    pub h: f64,
    /// Coefficients on powers of the centred margin.
    pub beta: Vec<f64>,
    pub gamma: DMatrix<f64>,
    pub n_eff: usize,
}

impl LocalPolyFit {
    pub fn intercept(&self) -> f64 {
        self.beta[0]
    }

    /// `nu! * beta[nu]`.
    pub fn derivative(&self, nu: usize) -> f64 {
        factorial(nu) * self.beta[nu]
    }
}

fn check_lengths(a: &[f64], r: &[f64]) -> Result<()> {
    if a.len() != r.len() {
        return Err(invalid("outcome and margin vectors differ in length"));
    }
    Ok(())
}

pub fn fit_one_side(
    a: &[f64],
    r: &[f64],
    side: Side,
    p: usize,
    h: f64,
    kernel: &Kernel,
) -> Result<LocalPolyFit> {
    check_lengths(a, r)?;
    let design = SideDesign::new(r, side, p, h, kernel)?;
    Ok(LocalPolyFit {
        side,
        p,
        h,
        beta: design.coefficients(a),
        gamma: design.gamma(),
        n_eff: design.n_eff(),
    })
}

/// `(gamma, vartheta)` for one side; no invertibility requirement.
pub fn design_matrices(
    r: &[f64],
    side: Side,
    p: usize,
    q_power: i32,
    h: f64,
    kernel: &Kernel,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    kernel.weight(0.0, h)?;
    let n = r.len().max(1) as f64;
    let mut gamma = DMatrix::zeros(p + 1, p + 1);
    let mut vartheta = DVector::zeros(p + 1);
    let mut x = vec![0.0; p + 1];
    for &ri in r.iter().filter(|&&ri| side.contains(ri)) {
        let w = kernel.weight(ri, h)?;
        if w == 0.0 {
            continue;
        }
        let u = ri / h;
        for (slot, pw) in x.iter_mut().zip(powers(u, p)) {
            *slot = pw;
        }
        let uq = u.powi(q_power);
        for a in 0..=p {
            vartheta[a] += w * uq * x[a];
            for b in 0..=p {
                gamma[(a, b)] += w * x[a] * x[b];
            }
        }
    }
    Ok((gamma / n, vartheta / n))
}

pub fn bias_factor(
    r: &[f64],
    side: Side,
    nu: usize,
    p: usize,
    q_power: i32,
    h: f64,
    kernel: &Kernel,
) -> Result<f64> {
    if nu > p {
        return Err(invalid("derivative order exceeds polynomial order"));
    }
    Ok(SideDesign::new(r, side, p, h, kernel)?.bias_factor(nu, q_power))
}

/// Population kernel functionals on `[0, support]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMoments {
    pub gamma: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub p: usize,
    kernel: Kernel,
}

impl KernelMoments {
    pub fn new(kernel: &Kernel, p: usize) -> Self {
        let mut gamma = DMatrix::zeros(p + 1, p + 1);
        let mut psi = DMatrix::zeros(p + 1, p + 1);
        for a in 0..=p {
            for b in 0..=p {
                let e = (a + b) as i32;
                gamma[(a, b)] = kernel.integrate(1, |u| u.powi(e));
                psi[(a, b)] = kernel.integrate(2, |u| u.powi(e));
            }
        }
        Self {
            gamma,
            psi,
            p,
            kernel: *kernel,
        }
    }

    pub fn vartheta(&self, q_power: i32) -> DVector<f64> {
        DVector::from_iterator(
            self.p + 1,
            (0..=self.p).map(|a| self.kernel.integrate(1, |u| u.powi(a as i32 + q_power))),
        )
    }

    fn gamma_inv(&self) -> DMatrix<f64> {
        self.gamma
            .clone()
            .cholesky()
            .expect("kernel moment matrix is positive definite")
            .inverse()
    }

    /// `nu! e_nu' gamma^{-1} vartheta_q`.
    pub fn bias_constant(&self, nu: usize, q_power: i32) -> f64 {
        factorial(nu) * (self.gamma_inv() * self.vartheta(q_power))[nu]
    }

    /// `nu!^2 e_nu' gamma^{-1} psi gamma^{-1} e_nu`.
    pub fn variance_constant(&self, nu: usize) -> f64 {
        let g = self.gamma_inv();
        factorial(nu).powi(2) * (&g * &self.psi * &g)[(nu, nu)]
    }
}
