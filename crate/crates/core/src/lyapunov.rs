//! Generator evaluation and grid checks of Lyapunov certificates.
//!
//! Grid checks cannot prove an inequality; a passing report means the
//! inequality held at every evaluated point, nothing more.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, Func};
use crate::linalg::SquareMatrix;
use crate::model::{EnvSpace, Model};
use crate::radial::{OdeSolution, RadialEnvelope};
use crate::sampling::{sphere_directions, tensor_grid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LyapunovError {
    #[error("environment {env} lies beyond the birth-death truncation n_max = {n_max}")]
    Truncation { env: usize, n_max: usize },
    #[error("test function needs {expected} environment expressions, got {got}")]
    EnvCount { expected: usize, got: usize },
    #[error("V = {value} is not positive at x = {x:?}, env {env}")]
    NonPositiveV { x: Vec<f64>, env: usize, value: f64 },
}

/// Cap on the number of points in a tensor grid; `grid_density` per axis is
/// reduced in high dimension to respect it.
pub const MAX_GRID_POINTS: usize = 1 << 20;

/// Radii of the ladder shells used beyond the sampling box.
pub const SHELL_RADII: [f64; 3] = [10.0, 100.0, 1000.0];

/// Value, gradient and Hessian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: SquareMatrix,
}

/// Symbolic derivatives of one expression.
#[derive(Debug, Clone)]
struct Derivatives {
    f: Expr,
    grad: Vec<Expr>,
    hess: Vec<Vec<Expr>>,
}

impl Derivatives {
    fn new(f: Expr, d: usize) -> Self {
        let grad: Vec<Expr> = (0..d).map(|k| f.differentiate(k)).collect();
        let hess = (0..d)
            .map(|r| (0..d).map(|c| if c < r { Expr::constant(0.0) } else { grad[r].differentiate(c) }).collect())
            .collect();
        Derivatives { f, grad, hess }
    }

    fn jet(&self, x: &[f64], env: usize) -> Jet {
        let d = x.len();
        let e = env as f64;
        let mut hess = SquareMatrix::zeros(d);
        for r in 0..d {
            for c in r..d {
                let v = self.hess[r][c].eval(x, e);
                hess[(r, c)] = v;
                hess[(c, r)] = v;
            }
        }
        Jet {
            value: self.f.eval(x, e),
            grad: self.grad.iter().map(|g| g.eval(x, e)).collect(),
            hess,
        }
    }
}

/// `φ(‖x‖²/2)` for a profile tabulated by the radial ODE solver, evaluated by
/// quintic Hermite interpolation of `(u, u', u'')`; `u''` at the nodes comes
/// from the ODE. Inside `r < ½` the value is held at `u(½)`.
#[derive(Debug, Clone)]
pub struct RadialProfile {
    grid: Vec<f64>,
    u: Vec<f64>,
    du: Vec<f64>,
    d2u: Vec<f64>,
}

impl RadialProfile {
    pub fn from_ode(sol: &OdeSolution, env: &RadialEnvelope) -> Self {
        let d2u = sol
            .grid
            .iter()
            .zip(sol.u.iter().zip(&sol.du))
            .map(|(&r, (&u, &v))| 2.0 * u / env.a(r) - env.b(r) * v)
            .collect();
        RadialProfile {
            grid: sol.grid.clone(),
            u: sol.u.clone(),
            du: sol.du.clone(),
            d2u,
        }
    }

    /// `(φ, φ', φ'')` at `r`; constant extrapolation of `φ` outside the grid.
    pub fn eval(&self, r: f64) -> (f64, f64, f64) {
        let n = self.grid.len();
        if r <= self.grid[0] {
            return (self.u[0], 0.0, 0.0);
        }
        if r >= self.grid[n - 1] {
            return (self.u[n - 1], 0.0, 0.0);
        }
        let k = self.grid.partition_point(|&g| g <= r) - 1;
        let h = self.grid[k + 1] - self.grid[k];
        let t = (r - self.grid[k]) / h;
        let (p0, p1) = (self.u[k], self.u[k + 1]);
        let (m0, m1) = (self.du[k] * h, self.du[k + 1] * h);
        let (c0, c1) = (self.d2u[k] * h * h, self.d2u[k + 1] * h * h);
        let (t2, t3) = (t * t, t * t * t);
        let (t4, t5) = (t3 * t, t3 * t2);
        let h0 = [1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5, -30.0 * t2 + 60.0 * t3 - 30.0 * t4, -60.0 * t + 180.0 * t2 - 120.0 * t3];
        let h1 = [t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5, 1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4, -36.0 * t + 96.0 * t2 - 60.0 * t3];
        let h2 = [
            0.5 * (t2 - 3.0 * t3 + 3.0 * t4 - t5),
            0.5 * (2.0 * t - 9.0 * t2 + 12.0 * t3 - 5.0 * t4),
            0.5 * (2.0 - 18.0 * t + 36.0 * t2 - 20.0 * t3),
        ];
        let h3 = [10.0 * t3 - 15.0 * t4 + 6.0 * t5, 30.0 * t2 - 60.0 * t3 + 30.0 * t4, 60.0 * t - 180.0 * t2 + 120.0 * t3];
        let h4 = [-4.0 * t3 + 7.0 * t4 - 3.0 * t5, -12.0 * t2 + 28.0 * t3 - 15.0 * t4, -24.0 * t + 84.0 * t2 - 60.0 * t3];
        let h5 = [
            0.5 * (t3 - 2.0 * t4 + t5),
            0.5 * (3.0 * t2 - 8.0 * t3 + 5.0 * t4),
            0.5 * (6.0 * t - 24.0 * t2 + 20.0 * t3),
        ];
        let comb = |j: usize| p0 * h0[j] + m0 * h1[j] + c0 * h2[j] + p1 * h3[j] + m1 * h4[j] + c1 * h5[j];
        (comb(0), comb(1) / h, comb(2) / (h * h))
    }
}

/// A test function on `ℝ^d × S`: one expression per environment (a single
/// expression is shared by all, and may use `i`), or a radial profile.
#[derive(Debug, Clone)]
pub enum TestFunction {
    Exprs(Vec<Expr>),
    Radial(RadialProfile),
}

/// Precomputed derivatives of a [`TestFunction`] for one model.
pub struct Prepared<'m> {
    model: &'m Model,
    kind: PreparedKind,
}

enum PreparedKind {
    Exprs { plain: Vec<Derivatives>, log: Vec<Derivatives> },
    Radial(RadialProfile),
}

/// `ln f` with products, quotients, powers and exponentials expanded, so
/// that `∇ ln f` stays finite where `f` itself underflows.
pub fn log_expr(e: &Expr) -> Expr {
    match e {
        Expr::Call(Func::Exp, args) => args[0].clone(),
        Expr::Pow(u, p) => Expr::Mul(Box::new(Expr::constant(*p)), Box::new(log_expr(u))),
        Expr::Mul(u, v) => Expr::Add(Box::new(log_expr(u)), Box::new(log_expr(v))),
        Expr::Div(u, v) => Expr::Sub(Box::new(log_expr(u)), Box::new(log_expr(v))),
        Expr::Call(Func::Sqrt, args) => Expr::Mul(Box::new(Expr::constant(0.5)), Box::new(log_expr(&args[0]))),
        _ => Expr::Call(Func::Log, vec![e.clone()]),
    }
    .simplify()
}

impl<'m> Prepared<'m> {
    pub fn new(model: &'m Model, f: &TestFunction) -> Result<Self, LyapunovError> {
        let kind = match f {
            TestFunction::Exprs(exprs) => {
                let expected = match model.env_space() {
                    EnvSpace::Finite(n) => *n,
                    EnvSpace::BirthDeath(_) => 1,
                };
                if exprs.len() != 1 && exprs.len() != expected {
                    return Err(LyapunovError::EnvCount { expected, got: exprs.len() });
                }
                let d = model.dim();
                PreparedKind::Exprs {
                    plain: exprs.iter().map(|e| Derivatives::new(e.clone(), d)).collect(),
                    log: exprs.iter().map(|e| Derivatives::new(log_expr(e), d)).collect(),
                }
            }
            TestFunction::Radial(p) => PreparedKind::Radial(p.clone()),
        };
        Ok(Prepared { model, kind })
    }

    fn slot(&self, env: usize) -> usize {
        match (&self.kind, self.model.env_space()) {
            (PreparedKind::Exprs { plain, .. }, EnvSpace::Finite(_)) if plain.len() > 1 => env - 1,
            _ => 0,
        }
    }

    pub fn value(&self, x: &[f64], env: usize) -> f64 {
        match &self.kind {
            PreparedKind::Exprs { plain, .. } => plain[self.slot(env)].f.eval(x, env as f64),
            PreparedKind::Radial(p) => p.eval(0.5 * x.iter().map(|c| c * c).sum::<f64>()).0,
        }
    }

    pub fn jet(&self, x: &[f64], env: usize) -> Jet {
        match &self.kind {
            PreparedKind::Exprs { plain, .. } => plain[self.slot(env)].jet(x, env),
            PreparedKind::Radial(p) => {
                let d = x.len();
                let (u, du, d2u) = p.eval(0.5 * x.iter().map(|c| c * c).sum::<f64>());
                let mut hess = SquareMatrix::zeros(d);
                for r in 0..d {
                    for c in 0..d {
                        hess[(r, c)] = d2u * x[r] * x[c] + if r == c { du } else { 0.0 };
                    }
                }
                Jet {
                    value: u,
                    grad: x.iter().map(|c| du * c).collect(),
                    hess,
                }
            }
        }
    }

    fn check_env(&self, env: usize) -> Result<(), LyapunovError> {
        match self.model.env_space() {
            EnvSpace::BirthDeath(_) if env > self.model.n_max() => Err(LyapunovError::Truncation {
                env,
                n_max: self.model.n_max(),
            }),
            _ => Ok(()),
        }
    }

    fn diffusion_part(&self, jet: &Jet, x: &[f64], env: usize) -> f64 {
        let b = self.model.drift_at(x, env);
        let a = self.model.diffusion_at(x, env);
        let d = x.len();
        let mut total: f64 = jet.grad.iter().zip(&b).map(|(g, b)| g * b).sum();
        for r in 0..d {
            for c in 0..d {
                total += 0.5 * jet.hess[(r, c)] * a[(r, c)];
            }
        }
        total
    }

    /// `L f(x, i)`. Birth-death generators are tridiagonal, so the chain sum
    /// is exact; `i` must lie within the truncation.
    pub fn generator(&self, x: &[f64], env: usize) -> Result<f64, LyapunovError> {
        self.check_env(env)?;
        let jet = self.jet(x, env);
        let mut total = self.diffusion_part(&jet, x, env);
        let q = self.model.q();
        for (j, rate) in q.off_diagonal(env, x) {
            total += rate * (self.value(x, j) - jet.value);
        }
        Ok(total)
    }

    /// `L f / f` computed through `g = ln f`:
    /// `⟨∇g, b⟩ + ½ tr((∇²g + ∇g ∇gᵀ) a) + Σ_j q_ij (f_j/f_i − 1)`.
    pub fn generator_ratio(&self, x: &[f64], env: usize) -> Result<f64, LyapunovError> {
        self.check_env(env)?;
        let PreparedKind::Exprs { log, plain } = &self.kind else {
            let v = self.value(x, env);
            return Ok(self.generator(x, env)? / v);
        };
        let s = self.slot(env);
        let mut jet = log[s].jet(x, env);
        let d = x.len();
        for r in 0..d {
            for c in 0..d {
                jet.hess[(r, c)] += jet.grad[r] * jet.grad[c];
            }
        }
        let mut total = self.diffusion_part(&jet, x, env);
        for (j, rate) in self.model.q().off_diagonal(env, x) {
            let ratio = if log.len() == 1 && !plain[0].f.uses_env() {
                1.0
            } else {
                (log[self.slot(j)].f.eval(x, j as f64) - jet.value).exp()
            };
            total += rate * (ratio - 1.0);
        }
        Ok(total)
    }
}

/// `L f(x, i)` for one point.
pub fn apply_generator(model: &Model, f: &TestFunction, x: &[f64], env: usize) -> Result<f64, LyapunovError> {
    Prepared::new(model, f)?.generator(x, env)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompactSet {
    #[serde(rename = "box")]
    pub bounds: Vec<[f64; 2]>,
    pub envs: Vec<usize>,
}

impl CompactSet {
    pub fn contains(&self, x: &[f64], env: usize) -> bool {
        self.envs.contains(&env) && x.iter().zip(&self.bounds).all(|(v, [lo, hi])| *v >= *lo && *v <= *hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    Forward,
    Reject,
}

#[derive(Debug, Clone)]
pub struct Certificate {
    pub v: TestFunction,
    pub kind: CertificateKind,
    pub k: CompactSet,
    /// Only used by reject certificates.
    pub c_set: Option<CompactSet>,
    /// `c` for forward certificates, `α` for reject certificates.
    pub c_or_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateWitness {
    pub x: Vec<f64>,
    pub env: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub passed: bool,
    pub violated_condition: Option<String>,
    pub witness: Option<CertificateWitness>,
    pub grid_size: usize,
    pub min_k: f64,
    pub max_k: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inf_outside_c: Option<f64>,
    /// Max of `V` on the box grid and on each shell of [`SHELL_RADII`].
    pub decay: Vec<f64>,
    pub notes: Vec<String>,
}

fn capped_density(d: usize, density: usize) -> usize {
    let cap = (MAX_GRID_POINTS as f64).powf(1.0 / d as f64).floor() as usize;
    density.clamp(2, cap.max(2))
}

fn box_grid(bounds: &[[f64; 2]], density: usize) -> Vec<Vec<f64>> {
    let n = capped_density(bounds.len(), density);
    tensor_grid(bounds, n)
}

/// Sphere points at geometric radii from 1 to 10³, 32 per decade.
fn ladder_points(d: usize) -> Vec<Vec<f64>> {
    let dirs = sphere_directions(d, 64 * d);
    (0..=96)
        .map(|k| 10f64.powf(k as f64 / 32.0))
        .flat_map(|rad| dirs.iter().map(move |t| t.iter().map(|c| c * rad).collect::<Vec<f64>>()).collect::<Vec<_>>())
        .collect()
}

fn shell_points(d: usize, radius: f64) -> Vec<Vec<f64>> {
    sphere_directions(d, 64 * d)
        .into_iter()
        .map(|t| t.iter().map(|c| c * radius).collect())
        .collect()
}

fn check_grid(model: &Model, density: usize) -> Vec<(Vec<f64>, usize)> {
    let envs = model.env_labels();
    let mut pts = box_grid(model.sampling_box(), density);
    pts.extend(ladder_points(model.dim()));
    pts.into_iter()
        .flat_map(|x| envs.iter().map(move |&e| (x.clone(), e)).collect::<Vec<_>>())
        .collect()
}

/// `(max, argmax)` of `score` in grid order; ties keep the first point.
fn argmax_by<T: Send + Sync>(items: &[T], score: impl Fn(&T) -> f64 + Sync) -> Option<(f64, usize)> {
    items
        .par_iter()
        .enumerate()
        .map(|(k, it)| (score(it), k))
        .reduce_with(|a, b| {
            let a_better = a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) || b.0.is_nan() && !a.0.is_nan();
            if a_better || (a.0.is_nan() && b.0.is_nan() && a.1 < b.1) {
                a
            } else {
                b
            }
        })
}

fn extremes_on_k(prep: &Prepared, k: &CompactSet, density: usize) -> (f64, f64) {
    let pts = box_grid(&k.bounds, density);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for x in &pts {
        for &e in &k.envs {
            let v = prep.value(x, e);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

fn decay_profile(prep: &Prepared, model: &Model, density: usize) -> Vec<f64> {
    let envs = model.env_labels();
    let max_on = |pts: &[Vec<f64>]| {
        pts.iter()
            .flat_map(|x| envs.iter().map(move |&e| prep.value(x, e)))
            .fold(f64::NEG_INFINITY, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v) })
    };
    let mut out = vec![max_on(&box_grid(model.sampling_box(), density))];
    for r in SHELL_RADII {
        out.push(max_on(&shell_points(model.dim(), r)));
    }
    out
}

fn grid_note(n: usize) -> String {
    format!("verified on a grid of {n} (point, environment) pairs; not a proof")
}

fn failed(report: &mut CertificateReport, condition: &str, witness: CertificateWitness) {
    if report.passed {
        report.passed = false;
        report.violated_condition = Some(condition.to_string());
        report.witness = Some(witness);
    }
}

pub fn check_forward_certificate(model: &Model, cert: &Certificate, grid_density: usize) -> CertificateReport {
    let prep = match Prepared::new(model, &cert.v) {
        Ok(p) => p,
        Err(e) => return invalid_report(e),
    };
    let grid = check_grid(model, grid_density);
    let (min_k, max_k) = extremes_on_k(&prep, &cert.k, grid_density);
    let decay = decay_profile(&prep, model, grid_density);
    let mut report = CertificateReport {
        passed: true,
        violated_condition: None,
        witness: None,
        grid_size: grid.len(),
        min_k,
        max_k,
        inf_outside_c: None,
        notes: vec![grid_note(grid.len())],
        decay: decay.clone(),
    };
    if !(min_k > 0.0) {
        let w = witness_min_on_k(&prep, &cert.k, grid_density);
        failed(&mut report, "positive_on_k", w);
    }
    let c = cert.c_or_alpha;
    // Scale-free score: LV/V − c where V > 0, otherwise the raw excess.
    let score = |(x, e): &(Vec<f64>, usize)| -> f64 {
        let lv = prep.generator(x, *e).unwrap_or(f64::NAN);
        let v = prep.value(x, *e);
        let excess = lv - c * v;
        if v > 0.0 {
            excess / v
        } else {
            excess
        }
    };
    if let Some((worst, k)) = argmax_by(&grid, score) {
        if !(worst <= 0.0) {
            let (x, e) = &grid[k];
            let lhs = prep.generator(x, *e).unwrap_or(f64::NAN);
            failed(
                &mut report,
                "generator_bound",
                CertificateWitness {
                    x: x.clone(),
                    env: *e,
                    lhs,
                    rhs: c * prep.value(x, *e),
                },
            );
        }
    }
    let shells = &decay[1..];
    let monotone = shells.windows(2).all(|w| w[1] < w[0]);
    if !(monotone && shells[shells.len() - 1] < 1e-3 * decay[0]) {
        let x = std::iter::once(SHELL_RADII[2]).chain(std::iter::repeat_n(0.0, model.dim() - 1)).collect();
        failed(
            &mut report,
            "vanishing_at_infinity",
            CertificateWitness {
                x,
                env: model.env_labels()[0],
                lhs: shells[shells.len() - 1],
                rhs: 1e-3 * decay[0],
            },
        );
    }
    report
}

pub fn check_reject_certificate(model: &Model, cert: &Certificate, grid_density: usize) -> CertificateReport {
    let prep = match Prepared::new(model, &cert.v) {
        Ok(p) => p,
        Err(e) => return invalid_report(e),
    };
    let grid = check_grid(model, grid_density);
    let (min_k, max_k) = extremes_on_k(&prep, &cert.k, grid_density);
    let decay = decay_profile(&prep, model, grid_density);
    let c_set = cert.c_set.as_ref().unwrap_or(&cert.k);
    let outside_c: Vec<&(Vec<f64>, usize)> = grid.iter().filter(|(x, e)| !c_set.contains(x, *e)).collect();
    let inf_c = argmax_by(&outside_c, |(x, e)| -prep.value(x, *e));
    let mut report = CertificateReport {
        passed: true,
        violated_condition: None,
        witness: None,
        grid_size: grid.len(),
        min_k,
        max_k,
        inf_outside_c: inf_c.map(|(v, _)| -v),
        notes: vec![
            grid_note(grid.len()),
            "infimum outside C approximated on the sampling box and radius ladder only".into(),
        ],
        decay: decay.clone(),
    };
    if !(max_k > 0.0) {
        let w = witness_min_on_k(&prep, &cert.k, grid_density);
        failed(&mut report, "positive_somewhere_on_k", w);
    }
    if let Some((neg_inf, k)) = inf_c {
        if !(-neg_inf > 0.0) {
            let (x, e) = outside_c[k];
            failed(
                &mut report,
                "positive_outside_c",
                CertificateWitness {
                    x: x.clone(),
                    env: *e,
                    lhs: -neg_inf,
                    rhs: 0.0,
                },
            );
        }
    }
    let alpha = cert.c_or_alpha;
    let outside_k: Vec<&(Vec<f64>, usize)> = grid.iter().filter(|(x, e)| !cert.k.contains(x, *e)).collect();
    let score = |(x, e): &&(Vec<f64>, usize)| -> f64 {
        let lu = prep.generator(x, *e).unwrap_or(f64::NAN);
        let u = prep.value(x, *e);
        let deficit = alpha * u - lu;
        if u > 0.0 {
            deficit / u
        } else {
            deficit
        }
    };
    if let Some((worst, k)) = argmax_by(&outside_k, score) {
        if !(worst <= 0.0) {
            let (x, e) = outside_k[k];
            failed(
                &mut report,
                "generator_bound",
                CertificateWitness {
                    x: x.clone(),
                    env: *e,
                    lhs: prep.generator(x, *e).unwrap_or(f64::NAN),
                    rhs: alpha * prep.value(x, *e),
                },
            );
        }
    }
    let shells = &decay[1..];
    let bounded = shells.iter().all(|v| v.is_finite()) && shells[2] <= 1.5 * shells[1].max(shells[0]).max(decay[0]);
    if !bounded {
        let x = std::iter::once(SHELL_RADII[2]).chain(std::iter::repeat_n(0.0, model.dim() - 1)).collect();
        failed(
            &mut report,
            "bounded",
            CertificateWitness {
                x,
                env: model.env_labels()[0],
                lhs: shells[2],
                rhs: shells[1],
            },
        );
    }
    report
}

fn witness_min_on_k(prep: &Prepared, k: &CompactSet, density: usize) -> CertificateWitness {
    let pts: Vec<(Vec<f64>, usize)> = box_grid(&k.bounds, density)
        .into_iter()
        .flat_map(|x| k.envs.iter().map(move |&e| (x.clone(), e)).collect::<Vec<_>>())
        .collect();
    let (_, idx) = argmax_by(&pts, |(x, e)| -prep.value(x, *e)).expect("compact set grid is nonempty");
    let (x, e) = &pts[idx];
    CertificateWitness {
        x: x.clone(),
        env: *e,
        lhs: prep.value(x, *e),
        rhs: 0.0,
    }
}

fn invalid_report(e: LyapunovError) -> CertificateReport {
    CertificateReport {
        passed: false,
        violated_condition: Some("invalid_certificate".into()),
        witness: Some(CertificateWitness {
            x: vec![],
            env: 0,
            lhs: f64::NAN,
            rhs: f64::NAN,
        }),
        grid_size: 0,
        min_k: f64::NAN,
        max_k: f64::NAN,
        inf_outside_c: None,
        decay: vec![],
        notes: vec![e.to_string()],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitC {
    /// `sup LV/V`, or `+∞` when the ratio grows along the radius ladder.
    pub c: f64,
    pub witness: CertificateWitness,
    /// Max of `LV/V` on each decade shell band `[10^k, 10^{k+1}]`.
    pub decade_maxima: Vec<f64>,
}

/// `sup LV/V` over the sampling box and the radius ladder, refined by a
/// golden-section search along the ray through the best grid point.
pub fn fit_c(model: &Model, v: &TestFunction, grid_density: usize) -> Result<FitC, LyapunovError> {
    let prep = Prepared::new(model, v)?;
    let envs = model.env_labels();
    for x in box_grid(model.sampling_box(), grid_density) {
        for &e in &envs {
            let val = prep.value(&x, e);
            if !(val > 0.0) && !(val == 0.0 && prep.generator_ratio(&x, e).is_ok_and(f64::is_finite)) {
                return Err(LyapunovError::NonPositiveV { x, env: e, value: val });
            }
        }
    }
    let grid = check_grid(model, grid_density);
    let ratio = |(x, e): &(Vec<f64>, usize)| {
        let r = prep.generator_ratio(x, *e).unwrap_or(f64::NAN);
        if r.is_nan() {
            f64::INFINITY
        } else {
            r
        }
    };
    let (best, k) = argmax_by(&grid, ratio).expect("grid is nonempty");
    let (x0, e0) = grid[k].clone();

    let decade_maxima: Vec<f64> = (0..3)
        .map(|dec| {
            let lo = 10f64.powi(dec);
            grid.iter()
                .filter(|(x, _)| {
                    let n = x.iter().map(|c| c * c).sum::<f64>().sqrt();
                    n >= lo * (1.0 - 1e-12) && n <= 10.0 * lo * (1.0 + 1e-12)
                })
                .map(ratio)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let grows = decade_maxima.windows(2).all(|w| w[1] > 2.0 * w[0].abs() && w[1] > 0.0)
        && decade_maxima[2] >= best;
    if grows || best == f64::INFINITY {
        let (x, e) = if grows {
            let k = grid
                .iter()
                .enumerate()
                .filter(|(_, (x, _))| x.iter().map(|c| c * c).sum::<f64>().sqrt() >= 100.0)
                .max_by(|a, b| ratio(a.1).total_cmp(&ratio(b.1)).then(b.0.cmp(&a.0)))
                .map(|(k, _)| k)
                .unwrap_or(k);
            grid[k].clone()
        } else {
            (x0, e0)
        };
        let lhs = ratio(&(x.clone(), e));
        return Ok(FitC {
            c: f64::INFINITY,
            witness: CertificateWitness { x, env: e, lhs, rhs: f64::INFINITY },
            decade_maxima,
        });
    }

    // Golden-section refinement of t ↦ ratio(t·x0) around t = 1.
    let n0 = x0.iter().map(|c| c * c).sum::<f64>().sqrt();
    let (mut x_best, mut f_best) = (x0.clone(), best);
    if n0 > 0.0 {
        let at = |t: f64| {
            let x: Vec<f64> = x0.iter().map(|c| c * t).collect();
            (ratio(&(x.clone(), e0)), x)
        };
        let step = 10f64.powf(1.0 / 32.0);
        let (mut a, mut b) = (1.0 / step, step);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c1 = b - g * (b - a);
        let mut c2 = a + g * (b - a);
        let (mut f1, mut f2) = (at(c1).0, at(c2).0);
        for _ in 0..80 {
            if f1 >= f2 {
                b = c2;
                c2 = c1;
                f2 = f1;
                c1 = b - g * (b - a);
                f1 = at(c1).0;
            } else {
                a = c1;
                c1 = c2;
                f1 = f2;
                c2 = a + g * (b - a);
                f2 = at(c2).0;
            }
        }
        let (f, x) = at(0.5 * (a + b));
        if f > f_best {
            f_best = f;
            x_best = x;
        }
    }
    let lhs = f_best;
    Ok(FitC {
        c: f_best,
        witness: CertificateWitness {
            x: x_best,
            env: e0,
            lhs,
            rhs: f_best,
        },
        decade_maxima,
    })
}
