//! Dense normal-equation oracle for fits, bias terms, robust variances and
//! the pre-trend statistic on small fixed-seed instances.

use dynrd::data::{PretrendVectors, RdVectors};
use dynrd::estimator::{adte_point, bias_estimate, estimate, robust_variance, NnConfig};
use dynrd::localpoly::{bias_factor, design_matrices, fit_one_side, Kernel, KernelKind, KernelMoments, Side};
use dynrd::pretrend::{pretrend_side, pretrend_test};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 25;
const REL: f64 = 1e-8;

fn assert_close(got: f64, want: f64, what: &str) {
    let err = (got - want).abs();
    assert!(
        err <= REL * want.abs() + 1e-13,
        "{what}: got {got:e}, oracle {want:e}, abs err {err:e}"
    );
}

type Matrix = Vec<Vec<f64>>;

/// Gauss-Jordan elimination with partial pivoting.
fn solve(mut a: Matrix, mut rhs: Vec<f64>) -> Vec<f64> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        let d = a[col][col];
        for k in 0..n {
            a[col][k] /= d;
        }
        rhs[col] /= d;
        for row in 0..n {
            if row != col {
                let f = a[row][col];
                for k in 0..n {
                    a[row][k] -= f * a[col][k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    rhs
}

fn unit(n: usize, k: usize) -> Vec<f64> {
    (0..n).map(|i| (i == k) as u8 as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tri(u: f64) -> f64 {
    (1.0 - u.abs()).max(0.0)
}

fn on_side(side: Side, r: f64) -> bool {
    match side {
        Side::Above => r >= 0.0,
        Side::Below => r < 0.0,
    }
}

/// Weighted least squares on one side in scaled units `u = r/h`.
struct DenseFit {
    order: usize,
    h: f64,
    n: f64,
    /// (index, u, weight) for observations with positive weight.
    obs: Vec<(usize, f64, f64)>,
    gram: Matrix,
}

impl DenseFit {
    fn new(r: &[f64], side: Side, order: usize, h: f64) -> Self {
        let obs: Vec<(usize, f64, f64)> = r
            .iter()
            .enumerate()
            .filter(|(_, &x)| on_side(side, x))
            .map(|(i, &x)| (i, x / h, tri(x / h) / h))
            .filter(|&(_, _, w)| w > 0.0)
            .collect();
        let n = r.len() as f64;
        let mut gram = vec![vec![0.0; order + 1]; order + 1];
        for &(_, u, w) in &obs {
            for a in 0..=order {
                for b in 0..=order {
                    gram[a][b] += w * u.powi((a + b) as i32) / n;
                }
            }
        }
        Self {
            order,
            h,
            n,
            obs,
            gram,
        }
    }

    fn row(&self, u: f64) -> Vec<f64> {
        (0..=self.order).map(|a| u.powi(a as i32)).collect()
    }

    fn scaled(&self, y: &[f64]) -> Vec<f64> {
        let mut rhs = vec![0.0; self.order + 1];
        for &(i, u, w) in &self.obs {
            for (a, slot) in rhs.iter_mut().enumerate() {
                *slot += w * u.powi(a as i32) * y[i] / self.n;
            }
        }
        solve(self.gram.clone(), rhs)
    }

    fn level(&self, y: &[f64]) -> f64 {
        self.scaled(y)[0]
    }

    fn second_derivative(&self, y: &[f64]) -> f64 {
        2.0 * self.scaled(y)[2] / (self.h * self.h)
    }

    fn bias_factor(&self) -> f64 {
        let mut theta = vec![0.0; self.order + 1];
        for &(_, u, w) in &self.obs {
            for (a, slot) in theta.iter_mut().enumerate() {
                *slot += w * u.powi(a as i32 + 2) / self.n;
            }
        }
        solve(self.gram.clone(), theta)[0]
    }

    /// Per-observation weight of the `nu`-th scaled coefficient.
    fn influence(&self, nu: usize) -> Vec<(usize, f64)> {
        let sel = solve(self.gram.clone(), unit(self.order + 1, nu));
        self.obs
            .iter()
            .map(|&(i, u, w)| (i, w * dot(&sel, &self.row(u)) / self.n))
            .collect()
    }
}

/// Combined nearest-neighbour second moment of `sum coef * var` inside the
/// support of the wider bandwidth, by brute-force neighbour search.
fn nn_sigma(r: &[f64], side: Side, width: f64, vars: &[&[f64]], coef: &[f64], j: usize) -> Vec<f64> {
    let members: Vec<usize> = (0..r.len())
        .filter(|&i| on_side(side, r[i]) && tri(r[i] / width) > 0.0)
        .collect();
    let mut sigma = vec![0.0; r.len()];
    for &i in &members {
        let mut others: Vec<(f64, usize)> = members
            .iter()
            .filter(|&&k| k != i)
            .map(|&k| ((r[k] - r[i]).abs(), k))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let resid: f64 = vars
            .iter()
            .zip(coef)
            .map(|(v, c)| {
                let mean = others[..j].iter().map(|&(_, k)| v[k]).sum::<f64>() / j as f64;
                c * (v[i] - mean)
            })
            .sum();
        sigma[i] = j as f64 / (j as f64 + 1.0) * resid * resid;
    }
    sigma
}

struct SideOracle {
    levels: Vec<f64>,
    curvatures: Vec<f64>,
    bias_factor: f64,
    level_fit: DenseFit,
    curve_fit: DenseFit,
}

impl SideOracle {
    fn new(r: &[f64], side: Side, h: f64, b: f64, vars: &[&[f64]]) -> Self {
        let level_fit = DenseFit::new(r, side, 1, h);
        let curve_fit = DenseFit::new(r, side, 2, b);
        Self {
            levels: vars.iter().map(|v| level_fit.level(v)).collect(),
            curvatures: vars.iter().map(|v| curve_fit.second_derivative(v)).collect(),
            bias_factor: level_fit.bias_factor(),
            level_fit,
            curve_fit,
        }
    }

    fn bias(&self, coef: &[f64]) -> f64 {
        dot(coef, &self.curvatures) / 2.0 * self.bias_factor
    }

    /// Sum of squared per-observation weights of the bias-corrected
    /// linearised functional times the neighbour second moments.
    fn variance(&self, r: &[f64], side: Side, vars: &[&[f64]], coef: &[f64], j: usize) -> f64 {
        let (h, b) = (self.level_fit.h, self.curve_fit.h);
        let sigma = nn_sigma(r, side, h.max(b), vars, coef, j);
        let mut omega = vec![0.0; r.len()];
        for (i, w) in self.level_fit.influence(0) {
            omega[i] += w;
        }
        let shrink = h * h * self.bias_factor / 2.0 * 2.0 / (b * b);
        for (i, w) in self.curve_fit.influence(2) {
            omega[i] -= shrink * w;
        }
        omega.iter().zip(&sigma).map(|(o, s)| o * o * s).sum()
    }
}

struct Instance {
    h: f64,
    b: f64,
    rd: RdVectors,
    pre: PretrendVectors,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let n = rng.random_range(120..320);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = r
        .iter()
        .map(|&x| 0.5 + x - 0.8 * x * x + if x >= 0.0 { 0.4 } else { 0.0 } + rng.random_range(-0.5..0.5))
        .collect();
    let never: Vec<f64> = r
        .iter()
        .map(|&x| (rng.random::<f64>() < 0.55 + 0.25 * x) as u8 as f64)
        .collect();
    let growth: Vec<f64> = r
        .iter()
        .zip(&never)
        .map(|(&x, &d)| d * (0.3 * x + x * x + rng.random_range(-0.4..0.4)))
        .collect();
    let change: Vec<f64> = r.iter().map(|&x| 0.2 * x + rng.random_range(-1.0..1.0)).collect();
    let h = rng.random_range(0.35..0.9);
    let b = rng.random_range(0.35..1.0);
    Instance {
        h,
        b,
        rd: RdVectors::new(r.clone(), y, growth, never.clone(), 2).unwrap(),
        pre: PretrendVectors::from_changes(r, &change, never).unwrap(),
    }
}

fn rd_vars(v: &RdVectors) -> [&[f64]; 3] {
    [&v.outcome, &v.growth, &v.never]
}

fn rd_coef(levels: &[f64]) -> [f64; 3] {
    [1.0, 1.0 / levels[2], -levels[1] / (levels[2] * levels[2])]
}

fn pre_vars(v: &PretrendVectors) -> [&[f64]; 4] {
    [&v.never_trend, &v.never, &v.ever_trend, &v.ever]
}

fn pre_coef(levels: &[f64]) -> [f64; 4] {
    [
        1.0 / levels[1],
        -levels[0] / (levels[1] * levels[1]),
        -1.0 / levels[3],
        levels[2] / (levels[3] * levels[3]),
    ]
}

pub fn one_sided_fits_match_normal_equations() {
    let k = Kernel::triangular();
    for seed in 0..INSTANCES {
        let inst = instance(seed);
        let r = &inst.rd.running;
        for side in Side::BOTH {
            for order in [1, 2] {
                let fit = fit_one_side(&inst.rd.outcome, r, side, order, inst.h, &k).unwrap();
                let dense = DenseFit::new(r, side, order, inst.h);
                let scaled = dense.scaled(&inst.rd.outcome);
                for (nu, beta) in fit.beta.iter().enumerate() {
                    let want = scaled[nu] / inst.h.powi(nu as i32);
                    assert_close(*beta, want, &format!("seed {seed} {side} p={order} beta[{nu}]"));
                }
                for a in 0..=order {
                    for c in 0..=order {
                        assert_close(fit.gamma[(a, c)], dense.gram[a][c], "gram");
                    }
                }
                assert_eq!(fit.n_eff, dense.obs.len());
            }
        }
    }
}

pub fn bias_factors_match() {
    let k = Kernel::triangular();
    for seed in 0..INSTANCES {
        let inst = instance(seed);
        for side in Side::BOTH {
            let got = bias_factor(&inst.rd.running, side, 0, 1, 2, inst.h, &k).unwrap();
            let want = DenseFit::new(&inst.rd.running, side, 1, inst.h).bias_factor();
            assert_close(got, want, &format!("seed {seed} {side} bias factor"));
        }
    }
}

pub fn point_bias_and_variance_match() {
    let k = Kernel::triangular();
    let nn = NnConfig::default();
    for seed in 0..INSTANCES {
        let inst = instance(seed);
        let v = &inst.rd;
        let vars = rd_vars(v);
        let sides: Vec<(Side, SideOracle)> = Side::BOTH
            .iter()
            .map(|&s| (s, SideOracle::new(&v.running, s, inst.h, inst.b, &vars)))
            .collect();
        let (above, below) = (&sides[0].1, &sides[1].1);

        let contrast = |o: &SideOracle| o.levels[0] + o.levels[1] / o.levels[2];
        let theta = contrast(above) - contrast(below);
        assert_close(
            adte_point(v, inst.h, &k).unwrap(),
            theta,
            &format!("seed {seed} point"),
        );

        let bias = above.bias(&rd_coef(&above.levels)) - below.bias(&rd_coef(&below.levels));
        assert_close(
            bias_estimate(v, inst.h, inst.b, &k).unwrap(),
            bias,
            &format!("seed {seed} bias"),
        );

        let variance: f64 = sides
            .iter()
            .map(|(s, o)| o.variance(&v.running, *s, &vars, &rd_coef(&o.levels), nn.j_star))
            .sum();
        let got = robust_variance(v, inst.h, inst.b, &k, &nn).unwrap();
        assert_close(got, variance, &format!("seed {seed} variance"));

        let est = estimate(v, inst.h, inst.b, &k, &nn, 0.05).unwrap();
        assert_close(
            est.theta_bc,
            theta - inst.h * inst.h * bias,
            "bias-corrected estimate",
        );
        assert_close(est.v_bc, variance, "estimate variance");
    }
}

pub fn pretrend_statistic_matches() {
    let k = Kernel::triangular();
    let nn = NnConfig::default();
    for seed in 0..INSTANCES {
        let inst = instance(seed);
        let v = &inst.pre;
        let vars = pre_vars(v);
        let mut stat = 0.0;
        for side in Side::BOTH {
            let o = SideOracle::new(&v.running, side, inst.h, inst.b, &vars);
            let coef = pre_coef(&o.levels);
            let pi = o.levels[0] / o.levels[1] - o.levels[2] / o.levels[3];
            let pi_bc = pi - inst.h * inst.h * o.bias(&coef);
            let var = o.variance(&v.running, side, &vars, &coef, nn.j_star);
            let got = pretrend_side(v, side, inst.h, inst.b, &k, &nn).unwrap();
            assert_close(got.pi_hat, pi, &format!("seed {seed} {side} pi"));
            assert_close(got.pi_bc, pi_bc, &format!("seed {seed} {side} pi_bc"));
            assert_close(got.v_bc, var, &format!("seed {seed} {side} variance"));
            stat += pi_bc * pi_bc / var;
        }
        let got = pretrend_test(v, 3, 1, inst.h, inst.b, &k, &nn).unwrap();
        assert_close(got.stat, stat, &format!("seed {seed} stat"));
        assert_close(got.p_value, (-stat / 2.0).exp(), &format!("seed {seed} p"));
    }
}

pub fn triangular_kernel_constants() {
    let m = KernelMoments::new(&Kernel::triangular(), 1);
    let gamma = [[0.5, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 12.0]];
    let psi = [[1.0 / 3.0, 1.0 / 12.0], [1.0 / 12.0, 1.0 / 30.0]];
    for a in 0..2 {
        for c in 0..2 {
            assert_close(m.gamma[(a, c)], gamma[a][c], "kernel gram");
            assert_close(m.psi[(a, c)], psi[a][c], "kernel psi");
        }
    }
    assert_close(m.bias_constant(0, 2), -0.1, "bias constant");
    assert_close(m.variance_constant(0), 4.8, "variance constant");
}

pub fn epanechnikov_quadrature_is_exact_for_polynomials() {
    let k = Kernel::new(KernelKind::Epanechnikov, 1.0).unwrap();
    for power in 0..8 {
        let exact = 0.75 * (1.0 / (power as f64 + 1.0) - 1.0 / (power as f64 + 3.0));
        assert_close(k.integrate(1, |u| u.powi(power)), exact, "epanechnikov moment");
    }
}

pub fn design_matrices_approach_kernel_moments() {
    // Midpoint grid on [-1, 1] with density 1/2.
    let n = 400_000;
    let r: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64).collect();
    let k = Kernel::triangular();
    let pop = KernelMoments::new(&k, 2);
    let h = 0.5;
    let (gamma, theta) = design_matrices(&r, Side::Above, 2, 2, h, &k).unwrap();
    let pop_theta = pop.vartheta(2);
    for a in 0..3 {
        assert_close(theta[a], 0.5 * pop_theta[a], "vartheta");
        for c in 0..3 {
            assert_close(gamma[(a, c)], 0.5 * pop.gamma[(a, c)], "gram");
        }
    }
}
