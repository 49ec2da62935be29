//! Radial (Khasminskii-type) tests in any dimension.
//!
//! With `r = ‖x‖²/2`, the coefficients are bounded by scalar envelopes
//! `a_d(r)` and `b_d(r)`:
//!
//! * upper: `a_d = sup ⟨x, a x⟩`, `b_d = inf (tr a + 2⟨x, b⟩)/⟨x, a x⟩`
//! * lower: the reverse.
//!
//! The envelopes are sampled over quasi-random sphere points and all
//! environments, then interpolated: `r·b_d(r)` linearly and `a_d` log-log
//! linearly in `ln r`, so `∫ b_d` has a closed form on every segment.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::Model;
use crate::quadrature::{
    integrate_from_anchor, probe_divergence_with, DivergenceVerdict, Outcome, PanelRange, ProbeOptions, QuadError,
};
use crate::sampling::{halton_box, sphere_directions};
use crate::verdict::{Evidence, FdOutcome, Prerequisites, Verdict};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RadialError {
    #[error("⟨x, a x⟩ = {value} is not positive at x = {x:?}, env {env}")]
    DegenerateDiffusion { x: Vec<f64>, env: usize, value: f64 },
    #[error("coefficients are not finite at radius r = {r} (env {env})")]
    NonFiniteCoefficient { r: f64, env: usize },
    #[error("envelope grid must be strictly increasing and start at or above 1/2")]
    BadGrid,
    #[error("shooting failed: {0}")]
    ShootingFailed(String),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Envelopes for the sufficient tests.
    Upper,
    /// Envelopes for the rejecting test.
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialEnvelope {
    pub direction: Direction,
    pub r_grid: Vec<f64>,
    pub a_d: Vec<f64>,
    pub b_d: Vec<f64>,
    pub sphere_samples: usize,
    #[serde(skip)]
    ln_r: Vec<f64>,
    #[serde(skip)]
    c: Vec<f64>,
    #[serde(skip)]
    ln_a: Vec<f64>,
}

impl RadialEnvelope {
    /// Builds an envelope from tabulated values.
    pub fn from_samples(
        direction: Direction,
        r_grid: Vec<f64>,
        a_d: Vec<f64>,
        b_d: Vec<f64>,
        sphere_samples: usize,
    ) -> Result<Self, RadialError> {
        if r_grid.len() < 2 || r_grid.windows(2).any(|w| w[1] <= w[0]) || r_grid[0] <= 0.0 {
            return Err(RadialError::BadGrid);
        }
        if let Some(k) = a_d.iter().position(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(RadialError::DegenerateDiffusion {
                x: vec![(2.0 * r_grid[k]).sqrt()],
                env: 0,
                value: a_d[k],
            });
        }
        Ok(RadialEnvelope {
            ln_r: r_grid.iter().map(|r| r.ln()).collect(),
            c: r_grid.iter().zip(&b_d).map(|(r, b)| r * b).collect(),
            ln_a: a_d.iter().map(|a| a.ln()).collect(),
            direction,
            r_grid,
            a_d,
            b_d,
            sphere_samples,
        })
    }

    /// Envelope given by closed-form functions on `r_grid`.
    pub fn from_fns(
        direction: Direction,
        r_grid: Vec<f64>,
        a_d: impl Fn(f64) -> f64,
        b_d: impl Fn(f64) -> f64,
    ) -> Result<Self, RadialError> {
        let a = r_grid.iter().map(|&r| a_d(r)).collect();
        let b = r_grid.iter().map(|&r| b_d(r)).collect();
        Self::from_samples(direction, r_grid, a, b, 0)
    }

    pub fn r_max(&self) -> f64 {
        *self.r_grid.last().unwrap()
    }

    /// Segment containing `r`; the end segments extend to 0 and ∞.
    fn segment(&self, r: f64) -> usize {
        let k = self.r_grid.partition_point(|&g| g <= r);
        k.clamp(1, self.r_grid.len() - 1) - 1
    }

    fn c_at(&self, k: usize, s: f64) -> f64 {
        let h = self.ln_r[k + 1] - self.ln_r[k];
        self.c[k] + (self.c[k + 1] - self.c[k]) * (s - self.ln_r[k]) / h
    }

    pub fn b(&self, r: f64) -> f64 {
        self.c_at(self.segment(r), r.ln()) / r
    }

    pub fn a(&self, r: f64) -> f64 {
        let k = self.segment(r);
        let h = self.ln_r[k + 1] - self.ln_r[k];
        let slope = (self.ln_a[k + 1] - self.ln_a[k]) / h;
        (self.ln_a[k] + slope * (r.ln() - self.ln_r[k])).exp()
    }

    /// `a_d'(r)/a_d(r)`.
    pub fn a_log_derivative(&self, r: f64) -> f64 {
        let k = self.segment(r);
        (self.ln_a[k + 1] - self.ln_a[k]) / (self.ln_r[k + 1] - self.ln_r[k]) / r
    }

    /// `∫_y^{y+t} b_d` in closed form. Each segment contributes
    /// `Δs·(c(s_0)+c(s_1))/2` with `Δs = ln(1 + Δr/r)`, which stays exact for
    /// offsets far below the float spacing at `y`.
    pub fn b_offset_integral(&self, y: f64, t: f64) -> f64 {
        let mut total = 0.0;
        let mut lo = y;
        let end = y + t;
        let mut remaining = t;
        while remaining > 0.0 {
            let k = self.segment(lo);
            let next = if k + 2 < self.r_grid.len() { self.r_grid[k + 1] } else { f64::INFINITY };
            let step = if next > lo { remaining.min(next - lo) } else { remaining };
            let ds = (step / lo).ln_1p();
            let s0 = lo.ln();
            total += ds * (self.c_at(k, s0) + self.c_at(k, s0 + ds)) / 2.0;
            remaining -= step;
            lo = if step == remaining + step { end } else { lo + step };
            if step <= 0.0 {
                break;
            }
        }
        total
    }

    /// `∫_lo^hi b_d`.
    pub fn b_integral(&self, lo: f64, hi: f64) -> f64 {
        if hi >= lo {
            self.b_offset_integral(lo, hi - lo)
        } else {
            -self.b_offset_integral(hi, lo - hi)
        }
    }
}

/// Geometric grid from 1/2 to `r_max` with `per_decade` points per decade.
pub fn default_r_grid(r_max: f64, per_decade: usize) -> Vec<f64> {
    let decades = (r_max / 0.5).log10();
    let n = (decades * per_decade as f64).ceil().max(1.0) as usize;
    (0..=n).map(|k| 0.5 * (r_max / 0.5).powf(k as f64 / n as f64)).collect()
}

pub fn default_sphere_samples(d: usize) -> usize {
    (64 * d).max(256)
}

/// Radial envelopes sampled at `sphere_samples` directions per radius and
/// every environment (birth-death environments up to `n_max`).
pub fn radial_envelopes(
    model: &Model,
    direction: Direction,
    r_grid: &[f64],
    sphere_samples: usize,
) -> Result<RadialEnvelope, RadialError> {
    let d = model.dim();
    let dirs = sphere_directions(d, sphere_samples.max(64 * d));
    let envs = model.env_labels();
    let rows: Vec<(f64, f64)> = r_grid
        .par_iter()
        .map(|&r| {
            let norm = (2.0 * r).sqrt();
            let mut a_env = match direction {
                Direction::Upper => f64::NEG_INFINITY,
                Direction::Lower => f64::INFINITY,
            };
            let mut b_env = -a_env;
            let mut x = vec![0.0; d];
            let mut ax = vec![0.0; d];
            let mut a = crate::linalg::SquareMatrix::zeros(d);
            let mut b = vec![0.0; d];
            for &env in &envs {
                for theta in &dirs {
                    for (xk, tk) in x.iter_mut().zip(theta) {
                        *xk = norm * tk;
                    }
                    model.diffusion_into(&x, env, &mut a);
                    model.drift_into(&x, env, &mut b);
                    a.mul_vec(&x, &mut ax);
                    let q: f64 = x.iter().zip(&ax).map(|(u, v)| u * v).sum();
                    let xb: f64 = x.iter().zip(&b).map(|(u, v)| u * v).sum();
                    let ratio = (a.trace() + 2.0 * xb) / q;
                    if !q.is_finite() || !ratio.is_finite() && q > 0.0 {
                        return Err(RadialError::NonFiniteCoefficient { r, env });
                    }
                    if !(q > 0.0) {
                        return Err(RadialError::DegenerateDiffusion {
                            x: x.clone(),
                            env,
                            value: q,
                        });
                    }
                    match direction {
                        Direction::Upper => {
                            a_env = a_env.max(q);
                            b_env = b_env.min(ratio);
                        }
                        Direction::Lower => {
                            a_env = a_env.min(q);
                            b_env = b_env.max(ratio);
                        }
                    }
                }
            }
            Ok((a_env, b_env))
        })
        .collect::<Result<_, _>>()?;
    let (a_d, b_d) = rows.into_iter().unzip();
    RadialEnvelope::from_samples(direction, r_grid.to_vec(), a_d, b_d, dirs.len())
}

/// `sup_{‖x‖ ≤ 1} (‖b‖ + tr a)` over a sample of the unit ball.
pub fn small_ball_bound(model: &Model) -> f64 {
    let d = model.dim();
    let cube = vec![[-1.0, 1.0]; d];
    let points = halton_box(&cube, 4096);
    let mut sup = 0.0f64;
    for env in model.env_labels() {
        for x in points.iter().filter(|x| x.iter().map(|c| c * c).sum::<f64>() <= 1.0) {
            let b = model.drift_at(x, env);
            let v = b.iter().map(|c| c * c).sum::<f64>().sqrt() + model.diffusion_at(x, env).trace();
            sup = sup.max(if v.is_nan() { f64::INFINITY } else { v });
        }
    }
    sup
}

pub fn radial_ladder() -> Vec<f64> {
    (1..=16).map(|k| 10f64.powi(k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PTests {
    pub direction: Direction,
    /// Convergence of `lim p(r)`, `p(r) = ∫₁^r exp(-∫₁^y b_d)`.
    pub p_limit: DivergenceVerdict,
    /// `∫₁^∞ p'(y) ∫_y^∞ dz/(a_d p'(z)) dy`, evaluated when `p` diverges.
    pub double_integral: Option<DivergenceVerdict>,
    pub fc1: bool,
    pub fc2: bool,
    pub reject: bool,
}

fn probe_or_inconclusive(r: Result<DivergenceVerdict, QuadError>) -> Result<DivergenceVerdict, RadialError> {
    match r {
        Ok(v) => Ok(v),
        Err(QuadError::MaxSubdivisions { lo, hi, .. }) => Ok(DivergenceVerdict::inconclusive(format!(
            "quadrature did not resolve the integrand on [{lo}, {hi}]"
        ))),
        Err(e) => Err(e.into()),
    }
}

fn inner_tail(env: &RadialEnvelope, y: f64, rel_tol: f64) -> f64 {
    let f = |t: f64| env.b_offset_integral(y, t).exp() / env.a(y + t);
    let rate = (env.b(y) - env.a_log_derivative(y)).abs();
    let scale = 1.0 / rate.max(1.0 / (1.0 + y));
    match integrate_from_anchor(f, 0.0, PanelRange::RightToInfinity, scale, rel_tol) {
        Ok(e) => e.value,
        Err(e) if e.is_positive_overflow() => f64::INFINITY,
        Err(QuadError::TailNotConverged { .. }) => f64::INFINITY,
        Err(_) => f64::NAN,
    }
}

/// The p-function tests for the envelope's direction: FC1/FC2 for upper
/// envelopes, the rejecting test for lower ones.
pub fn khasminskii_p_tests(env: &RadialEnvelope, ladder: &[f64]) -> Result<PTests, RadialError> {
    let single = ProbeOptions {
        segment_rel_tol: 1e-10,
        ..ProbeOptions::default()
    };
    let outer = ProbeOptions {
        segment_rel_tol: 1e-7,
        ..ProbeOptions::default()
    };
    let p_limit = probe_or_inconclusive(probe_divergence_with(
        |y| (-env.b_integral(1.0, y)).exp(),
        1.0,
        ladder,
        &single,
    ))?;
    let double_integral = if p_limit.outcome.diverges() {
        let inner_total = probe_or_inconclusive(probe_divergence_with(
            |z| env.b_integral(1.0, z).exp() / env.a(z),
            1.0,
            ladder,
            &single,
        ))?;
        Some(match inner_total.outcome {
            Outcome::Converges(_) => probe_or_inconclusive(probe_divergence_with(
                |y| inner_tail(env, y, 1e-10),
                1.0,
                ladder,
                &outer,
            ))?,
            _ => DivergenceVerdict {
                rationale: format!("inner integral from 1: {}", inner_total.rationale),
                ..inner_total
            },
        })
    } else {
        None
    };
    let double = double_integral.as_ref().map(|v| &v.outcome);
    let (fc1, fc2, reject) = match env.direction {
        Direction::Upper => (
            p_limit.outcome.converges(),
            matches!(double, Some(Outcome::Diverges)),
            false,
        ),
        Direction::Lower => (false, false, matches!(double, Some(Outcome::Converges(_)))),
    };
    Ok(PTests {
        direction: env.direction,
        p_limit,
        double_integral,
        fc1,
        fc2,
        reject,
    })
}

// ---------------------------------------------------------------------------
// Growth conditions

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    /// `‖b‖ ≤ β(1+‖x‖)` and `tr a ≤ β(1+‖x‖²)` with no growth across decades.
    pub suff2: bool,
    /// `2⟨x,b⟩ + tr a ≤ c(1+‖x‖²)` with no growth across decades.
    pub existence: bool,
    pub beta_witness: f64,
    pub existence_constant: f64,
    /// `(decade upper radius, max ‖b‖/(1+‖x‖), max tr a/(1+‖x‖²), max (2⟨x,b⟩+tr a)/(1+‖x‖²))`.
    pub decades: Vec<(f64, f64, f64, f64)>,
}

fn no_growth(values: &[f64]) -> bool {
    match values {
        [.., prev, last] => last.is_finite() && *last <= 1.5 * prev.max(0.0) + 1e-12,
        _ => true,
    }
}

/// Linear-growth checks on the sampling box and a radius ladder up to 10³.
pub fn growth_check(model: &Model) -> GrowthReport {
    let d = model.dim();
    let dirs = sphere_directions(d, 64 * d);
    let envs = model.env_labels();
    let measure = |x: &[f64]| -> (f64, f64, f64) {
        let nx2: f64 = x.iter().map(|c| c * c).sum();
        let mut worst = (0.0f64, 0.0f64, f64::NEG_INFINITY);
        for &env in &envs {
            let b = model.drift_at(x, env);
            let tr = model.diffusion_at(x, env).trace();
            let nb = b.iter().map(|c| c * c).sum::<f64>().sqrt();
            let xb: f64 = x.iter().zip(&b).map(|(u, v)| u * v).sum();
            let nan_inf = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
            worst.0 = worst.0.max(nan_inf(nb / (1.0 + nx2.sqrt())));
            worst.1 = worst.1.max(nan_inf(tr / (1.0 + nx2)));
            worst.2 = worst.2.max(nan_inf((2.0 * xb + tr) / (1.0 + nx2)));
        }
        worst
    };
    let mut box_points = halton_box(model.sampling_box(), crate::model::VALIDATION_POINTS);
    box_points.push(vec![0.0; d]);
    let fold = |pts: &mut dyn Iterator<Item = Vec<f64>>| {
        pts.map(|x| measure(&x))
            .fold((0.0f64, 0.0f64, f64::NEG_INFINITY), |m, v| (m.0.max(v.0), m.1.max(v.1), m.2.max(v.2)))
    };
    let base = fold(&mut box_points.into_iter());
    let mut decades = Vec::new();
    for k in 0..3 {
        let lo = 10f64.powi(k);
        let radii: Vec<f64> = (0..=8).map(|j| lo * 10f64.powf(j as f64 / 8.0)).collect();
        let mut pts = radii
            .iter()
            .flat_map(|&rad| dirs.iter().map(move |t| t.iter().map(|c| c * rad).collect::<Vec<f64>>()));
        let m = fold(&mut pts);
        decades.push((lo * 10.0, m.0, m.1, m.2));
    }
    let col = |f: fn(&(f64, f64, f64, f64)) -> f64| decades.iter().map(f).collect::<Vec<f64>>();
    let (gb, ga, ge) = (col(|t| t.1), col(|t| t.2), col(|t| t.3));
    let beta = gb.iter().chain(&ga).copied().fold(base.0.max(base.1), f64::max);
    let c = ge.iter().copied().fold(base.2, f64::max).max(0.0);
    GrowthReport {
        suff2: no_growth(&gb) && no_growth(&ga) && beta.is_finite(),
        existence: no_growth(&ge) && c.is_finite(),
        beta_witness: beta,
        existence_constant: c,
        decades,
    }
}

// ---------------------------------------------------------------------------
// The radial Lyapunov ODE  ½ a_d b_d u' + ½ a_d u'' = u,  u(½) = 1

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdeSolution {
    pub grid: Vec<f64>,
    pub u: Vec<f64>,
    pub du: Vec<f64>,
    pub tail_limit_estimate: f64,
    pub decreasing: bool,
    /// Max-norm of `½a_d b_d u' + ½a_d u'' - u` over interior grid points,
    /// with `u''` from central differences of `u'` at `r(1 ± 10⁻⁴)`.
    pub residual_max: f64,
    /// Points where the shooting was restarted from the current solution.
    pub restarts: Vec<f64>,
}

impl OdeSolution {
    /// `(u, u')` at `r`, cubic Hermite between grid points; `r` is clamped
    /// to the solved range.
    pub fn eval(&self, r: f64) -> (f64, f64) {
        let r = r.clamp(self.grid[0], *self.grid.last().unwrap());
        let k = self.grid.partition_point(|&g| g <= r).clamp(1, self.grid.len() - 1) - 1;
        let (r0, r1) = (self.grid[k], self.grid[k + 1]);
        let h = r1 - r0;
        let t = (r - r0) / h;
        let (u0, u1, d0, d1) = (self.u[k], self.u[k + 1], self.du[k] * h, self.du[k + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let u = (2.0 * t3 - 3.0 * t2 + 1.0) * u0 + (t3 - 2.0 * t2 + t) * d0 + (-2.0 * t3 + 3.0 * t2) * u1 + (t3 - t2) * d1;
        let du = ((6.0 * t2 - 6.0 * t) * u0 + (3.0 * t2 - 4.0 * t + 1.0) * d0 + (-6.0 * t2 + 6.0 * t) * u1 + (3.0 * t2 - 2.0 * t) * d1) / h;
        (u, du)
    }
}

/// What happens to a trajectory of the ODE.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Fate {
    /// `u` reaches 0: the initial slope was too steep.
    HitsZero,
    /// `u'` becomes positive: the initial slope was too shallow.
    TurnsUp,
    Survives,
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const ODE_RTOL: f64 = 1e-12;
const FATE_HORIZON: f64 = 1e12;

struct Shooter<'e> {
    env: &'e RadialEnvelope,
}

impl Shooter<'_> {
    fn rhs(&self, r: f64, y: [f64; 2]) -> [f64; 2] {
        [y[1], 2.0 * y[0] / self.env.a(r) - self.env.b(r) * y[1]]
    }

    /// One Dormand–Prince step; returns the 5th-order solution and the error norm.
    fn step(&self, r: f64, y: [f64; 2], h: f64) -> ([f64; 2], f64) {
        let mut k = [[0.0; 2]; 7];
        for s in 0..7 {
            let mut ys = y;
            for (j, kj) in k.iter().enumerate().take(s) {
                ys[0] += h * A[s][j] * kj[0];
                ys[1] += h * A[s][j] * kj[1];
            }
            k[s] = self.rhs(r + C[s] * h, ys);
        }
        let mut y5 = y;
        let mut err = [0.0; 2];
        for s in 0..7 {
            for c in 0..2 {
                y5[c] += h * B5[s] * k[s][c];
                err[c] += h * (B5[s] - B4[s]) * k[s][c];
            }
        }
        let sc_u = ODE_RTOL * y[0].abs().max(y5[0].abs()) + 1e-300;
        let sc_v = ODE_RTOL * (y[1].abs().max(y5[1].abs()) + 1e-8 * y[0].abs() / (1.0 + r)) + 1e-300;
        let norm = (err[0] / sc_u).abs().max((err[1] / sc_v).abs());
        (y5, norm)
    }

    /// Integrates from `(r0, y0)` through the sorted `outputs`, stopping at the
    /// first sign event. Returns the fate and the states at the outputs reached.
    /// Integrates from `(r0, y0)` through the sorted `outputs`, stopping at the
    /// first sign event. A trajectory that survives the outputs is followed
    /// to `FATE_HORIZON` times further out to settle its fate; slowly
    /// separating modes (power-law rather than exponential) need this.
    fn run(&self, r0: f64, y0: [f64; 2], outputs: &[f64]) -> Result<(Fate, Vec<[f64; 2]>), RadialError> {
        let mut r = r0;
        let mut y = y0;
        let mut h = 1e-3 * (1.0 + r0);
        let mut states = Vec::with_capacity(outputs.len());
        let horizon = outputs.last().copied().unwrap_or(r0) * FATE_HORIZON;
        let targets = outputs.iter().copied().chain(std::iter::once(horizon));
        for (k, target) in targets.enumerate() {
            while r < target {
                let h_try = h.min(target - r);
                let (y_new, err) = self.step(r, y, h_try);
                if !(err <= 1.0) && h_try > 1e-13 * r {
                    h = h_try * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                    continue;
                }
                if !y_new[0].is_finite() || !y_new[1].is_finite() {
                    return Err(RadialError::ShootingFailed(format!("non-finite state at r = {r}")));
                }
                r = if h_try == target - r { target } else { r + h_try };
                y = y_new;
                h = h_try * (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
                if y[0] <= 0.0 {
                    return Ok((Fate::HitsZero, states));
                }
                if y[1] > 0.0 {
                    return Ok((Fate::TurnsUp, states));
                }
                if k == outputs.len() && y[0] < 1e-200 {
                    y = [y[0] * 1e200, y[1] * 1e200];
                }
            }
            if k < outputs.len() {
                states.push(y);
            }
        }
        Ok((Fate::Survives, states))
    }

    fn fate(&self, r0: f64, u0: f64, slope: f64, outputs: &[f64]) -> Result<Fate, RadialError> {
        Ok(self.run(r0, [u0, slope], outputs)?.0)
    }
}

/// Output grid: geometric, 32 points per decade, plus the residual
/// stencil points `r(1 ± δ)`.
fn ode_outputs(r_max: f64) -> (Vec<f64>, Vec<f64>) {
    let grid = default_r_grid(r_max, 32);
    let mut all: Vec<f64> = Vec::with_capacity(grid.len() * 3);
    for (k, &r) in grid.iter().enumerate() {
        if k > 0 && k + 1 < grid.len() {
            all.push(r * (1.0 - RESIDUAL_DELTA));
            all.push(r);
            all.push(r * (1.0 + RESIDUAL_DELTA));
        } else {
            all.push(r);
        }
    }
    (grid, all)
}

const RESIDUAL_DELTA: f64 = 1e-4;

/// Solves the radial ODE on `[½, r_max]` for the decreasing positive
/// solution by bisection on `u'(½)`, restarting from the current solution
/// wherever the bracketing trajectories separate.
pub fn solve_ode2(env: &RadialEnvelope, r_max: f64) -> Result<OdeSolution, RadialError> {
    let shooter = Shooter { env };
    let (grid, outputs) = ode_outputs(r_max);
    let mut states: Vec<[f64; 2]> = Vec::with_capacity(outputs.len());
    let mut log_scale = 0.0f64;
    let mut scales: Vec<f64> = Vec::with_capacity(outputs.len());
    let mut restarts = Vec::new();
    let (mut r0, mut u0, mut guess) = (0.5, 1.0, -1.0f64);
    let mut start = 1;
    states.push([1.0, f64::NAN]);
    scales.push(0.0);
    loop {
        let outs = &outputs[start..];
        // Bracket: slope 0 turns up immediately; double until a trajectory hits zero.
        let mut hi = 0.0;
        let mut lo = guess.min(-1e-300);
        let mut found = false;
        for _ in 0..2100 {
            match shooter.fate(r0, u0, lo, outs)? {
                Fate::HitsZero => {
                    found = true;
                    break;
                }
                Fate::TurnsUp => {
                    hi = lo;
                    lo *= 2.0;
                }
                Fate::Survives => {
                    found = true;
                    break;
                }
            }
        }
        if !found {
            return Err(RadialError::ShootingFailed(format!("no steep bracket at r = {r0}")));
        }
        let mut survivor = None;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            match shooter.fate(r0, u0, mid, outs)? {
                Fate::HitsZero => lo = mid,
                Fate::TurnsUp => hi = mid,
                Fate::Survives => {
                    survivor = Some(mid);
                    break;
                }
            }
        }
        let (_, steep) = shooter.run(r0, [u0, survivor.unwrap_or(lo)], outs)?;
        let (_, shallow) = shooter.run(r0, [u0, survivor.unwrap_or(hi)], outs)?;
        let agreed = steep
            .iter()
            .zip(&shallow)
            .take_while(|(a, b)| {
                (a[0] - b[0]).abs() <= 1e-8 * a[0].abs() && (a[1] - b[1]).abs() <= 1e-8 * a[1].abs().max(1e-300)
            })
            .count();
        if start == 1 {
            states[0][1] = 0.5 * (lo + hi);
        }
        if agreed == 0 {
            return Err(RadialError::ShootingFailed(format!(
                "bracketing trajectories separate immediately after r = {r0}"
            )));
        }
        for s in &steep[..agreed] {
            states.push(*s);
            scales.push(log_scale);
        }
        start += agreed;
        if start >= outputs.len() {
            break;
        }
        // Restart from the last agreed point, renormalised to u = 1,
        // preferring a grid point over a residual stencil point.
        let mut back = start;
        while back > 1 && outputs[back - 1] > r0 && !grid.contains(&outputs[back - 1]) {
            back -= 1;
        }
        if outputs[back - 1] > r0 && grid.contains(&outputs[back - 1]) {
            states.truncate(back);
            scales.truncate(back);
            start = back;
        }
        let last = *states.last().unwrap();
        r0 = outputs[start - 1];
        if restarts.last() == Some(&r0) || r0 <= 0.5 && !restarts.is_empty() {
            return Err(RadialError::ShootingFailed(format!("no progress past r = {r0}")));
        }
        restarts.push(r0);
        log_scale += last[0].ln();
        u0 = 1.0;
        guess = 2.0 * last[1] / last[0];
    }
    let value = |k: usize| {
        let f = scales[k].exp();
        (states[k][0] * f, states[k][1] * f)
    };
    let mut u = Vec::with_capacity(grid.len());
    let mut du = Vec::with_capacity(grid.len());
    let mut residual_max = 0.0f64;
    let mut k = 0;
    for (g, &r) in grid.iter().enumerate() {
        if g > 0 && g + 1 < grid.len() {
            let (_, v_minus) = value(k);
            let (ur, vr) = value(k + 1);
            let (_, v_plus) = value(k + 2);
            let straddles = restarts
                .iter()
                .any(|&s| s >= r * (1.0 - RESIDUAL_DELTA) && s <= r * (1.0 + RESIDUAL_DELTA));
            if !straddles {
                let d2 = (v_plus - v_minus) / (2.0 * RESIDUAL_DELTA * r);
                let a = env.a(r);
                let res = 0.5 * a * env.b(r) * vr + 0.5 * a * d2 - ur;
                residual_max = residual_max.max(res.abs());
            }
            u.push(ur);
            du.push(vr);
            k += 3;
        } else {
            let (ur, vr) = value(k);
            u.push(ur);
            du.push(vr);
            k += 1;
        }
    }
    let decreasing = u.windows(2).all(|w| w[1] <= w[0]) && du.iter().all(|v| *v <= 0.0);
    let tail_limit_estimate = tail_estimate(&grid, &u);
    Ok(OdeSolution {
        grid,
        u,
        du,
        tail_limit_estimate,
        decreasing,
        residual_max,
        restarts,
    })
}

/// `lim u` assuming `u(r) ≈ L + C/r` over the last decade, clamped to `[0, u(R)]`.
fn tail_estimate(grid: &[f64], u: &[f64]) -> f64 {
    let n = grid.len() - 1;
    let r_end = grid[n];
    let k = grid.partition_point(|&g| g < r_end / 10.0).min(n);
    let (r1, u1) = (grid[k], u[k]);
    let (r2, u2) = (r_end, u[n]);
    if r1 >= r2 {
        return u2.max(0.0);
    }
    // L + C/r through both points.
    let l = (u2 * r2 - u1 * r1) / (r2 - r1);
    l.clamp(0.0, u2.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ULimit {
    ToZero,
    Positive,
    Undetermined,
}

/// `< 1e-3` counts as `u → 0`; `> 1e-2` and stable between two horizons as `lim u > 0`.
pub fn classify_u_limit(short: &OdeSolution, long: &OdeSolution) -> ULimit {
    let (a, b) = (short.tail_limit_estimate, long.tail_limit_estimate);
    if b < 1e-3 {
        ULimit::ToZero
    } else if a > 1e-2 && b > 1e-2 && (a - b).abs() <= 0.1 * b {
        ULimit::Positive
    } else {
        ULimit::Undetermined
    }
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone, PartialEq)]
pub struct RadialOptions {
    pub r_max: f64,
    pub per_decade: usize,
    pub sphere_samples: Option<usize>,
    pub ladder: Vec<f64>,
    pub ode_horizons: (f64, f64),
}

impl Default for RadialOptions {
    fn default() -> Self {
        RadialOptions {
            r_max: 1e16,
            per_decade: 16,
            sphere_samples: None,
            ladder: radial_ladder(),
            ode_horizons: (1e3, 1e4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdeSummary {
    pub direction: Direction,
    pub horizons: (f64, f64),
    pub tail_limit_estimates: (f64, f64),
    pub residual_max: f64,
    pub decreasing: bool,
    pub limit: ULimit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialReport {
    pub verdict: Verdict,
    pub upper: PTests,
    pub lower: Option<PTests>,
    pub growth: GrowthReport,
    pub small_ball_sup: f64,
    pub ode: Vec<OdeSummary>,
}

fn ode_summary(env: &RadialEnvelope, horizons: (f64, f64)) -> Option<OdeSummary> {
    let short = solve_ode2(env, horizons.0).ok()?;
    let long = solve_ode2(env, horizons.1).ok()?;
    Some(OdeSummary {
        direction: env.direction,
        horizons,
        tail_limit_estimates: (short.tail_limit_estimate, long.tail_limit_estimate),
        residual_max: short.residual_max.max(long.residual_max),
        decreasing: short.decreasing && long.decreasing,
        limit: classify_u_limit(&short, &long),
    })
}

/// Radial sufficiency (FC1/FC2 or linear growth) and, for finite
/// environment spaces, the rejecting test.
pub fn classify_radial(model: &Model, opts: &RadialOptions) -> Result<RadialReport, RadialError> {
    let grid = default_r_grid(opts.r_max, opts.per_decade);
    let samples = opts.sphere_samples.unwrap_or_else(|| default_sphere_samples(model.dim()));
    let upper_env = radial_envelopes(model, Direction::Upper, &grid, samples)?;
    let upper = khasminskii_p_tests(&upper_env, &opts.ladder)?;
    let lower_env = if model.is_finite_env() {
        Some(radial_envelopes(model, Direction::Lower, &grid, samples)?)
    } else {
        None
    };
    let lower = lower_env
        .as_ref()
        .map(|e| khasminskii_p_tests(e, &opts.ladder))
        .transpose()?;
    let growth = growth_check(model);
    let small = small_ball_bound(model);

    let mut notes = vec![
        format!("envelopes sampled on {} radii x {} directions", grid.len(), upper_env.sphere_samples),
        "Hölder regularity of the envelopes is assumed, not verified".to_string(),
    ];
    if !model.is_finite_env() {
        notes.push(format!(
            "environments truncated at n_max = {}; rejecting test needs finitely many environments",
            model.n_max()
        ));
    }
    let chain_fd = match model.q() {
        crate::model::QMatrixSpec::BirthDeath(r) => crate::ctmc::powerlaw_verdict(r.alpha, r.lambda, r.mu),
        _ => true,
    };
    let suff1 = (upper.fc1 || upper.fc2) && small.is_finite();
    let sufficient = suff1 || growth.suff2;
    let reject = lower.as_ref().is_some_and(|l| l.reject);
    let outcome = match (sufficient, reject) {
        (true, true) => {
            notes.push("sufficient and rejecting tests both fired".into());
            FdOutcome::Inconclusive
        }
        (true, false) if chain_fd => FdOutcome::FellerDynkin,
        (true, false) => {
            notes.push("environment chain is not known to be Feller-Dynkin".into());
            FdOutcome::Inconclusive
        }
        (false, true) => FdOutcome::NotFellerDynkin,
        (false, false) => FdOutcome::Inconclusive,
    };
    if growth.suff2 && !suff1 {
        notes.push(format!("linear growth holds with beta = {}", growth.beta_witness));
    }
    let mut ode = Vec::new();
    if upper.fc1 || upper.fc2 {
        ode.extend(ode_summary(&upper_env, opts.ode_horizons));
    }
    if let (true, Some(env)) = (reject, lower_env.as_ref()) {
        ode.extend(ode_summary(env, opts.ode_horizons));
    }
    let mut evidence = vec![Evidence {
        test: "p_upper".into(),
        env: None,
        verdict: upper.p_limit.clone(),
    }];
    if let Some(v) = &upper.double_integral {
        evidence.push(Evidence {
            test: "fc2_double".into(),
            env: None,
            verdict: v.clone(),
        });
    }
    if let Some(l) = &lower {
        evidence.push(Evidence {
            test: "p_lower".into(),
            env: None,
            verdict: l.p_limit.clone(),
        });
        if let Some(v) = &l.double_integral {
            evidence.push(Evidence {
                test: "reject_double".into(),
                env: None,
                verdict: v.clone(),
            });
        }
    }
    let continuous = model.coefficients_continuous();
    Ok(RadialReport {
        verdict: Verdict {
            outcome,
            evidence,
            prerequisites: Prerequisites {
                cb_feller_assumed: continuous,
                chain_fd_assumed: chain_fd,
                holder_assumed: true,
                ..Prerequisites::default()
            },
            notes,
        },
        upper,
        lower,
        growth,
        small_ball_sup: small,
        ode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{one_dim_config, EnvironmentsConfig, ModelConfig};

    fn bm(d: usize) -> Model {
        let cfg = ModelConfig {
            dimension: d,
            environments: EnvironmentsConfig::Count(1),
            drift: vec![vec!["0".into(); d]],
            diffusion: vec![(0..d)
                .map(|r| (0..d).map(|c| if r == c { "1".into() } else { "0".into() }).collect())
                .collect()],
            qmatrix: None,
            sampling_box: vec![[-1.0, 1.0]; d],
        };
        Model::load(&cfg, 200).unwrap()
    }

    #[test]
    fn brownian_envelopes_are_exact() {
        let m = bm(3);
        let grid = default_r_grid(1e4, 4);
        for dir in [Direction::Upper, Direction::Lower] {
            let e = radial_envelopes(&m, dir, &grid, 192).unwrap();
            for (k, &r) in grid.iter().enumerate() {
                assert!((e.a_d[k] - 2.0 * r).abs() <= 1e-12 * r);
                assert!((e.b_d[k] - 1.5 / r).abs() <= 1e-12 / r);
            }
        }
    }

    #[test]
    fn quartic_envelopes() {
        let m = Model::load(&one_dim_config(&["0"], &["1 + x1^4"], None, 1.0), 200).unwrap();
        let grid = default_r_grid(1e3, 4);
        let e = radial_envelopes(&m, Direction::Lower, &grid, 64).unwrap();
        for (k, &r) in grid.iter().enumerate() {
            let exact = 2.0 * r * (1.0 + 4.0 * r * r);
            assert!((e.a_d[k] - exact).abs() <= 1e-12 * exact);
            assert!((e.b_d[k] - 0.5 / r).abs() <= 1e-12 / r);
        }
    }

    #[test]
    fn anisotropic_upper_envelope() {
        let cfg = ModelConfig {
            dimension: 2,
            environments: EnvironmentsConfig::Count(1),
            drift: vec![vec!["0".into(), "0".into()]],
            diffusion: vec![vec![vec!["1".into(), "0".into()], vec!["0".into(), "4".into()]]],
            qmatrix: None,
            sampling_box: vec![[-1.0, 1.0]; 2],
        };
        let m = Model::load(&cfg, 200).unwrap();
        let e = radial_envelopes(&m, Direction::Upper, &[1.0, 10.0], 256).unwrap();
        assert!((e.a_d[0] - 8.0).abs() <= 0.02 * 8.0);
        assert!((e.a_d[1] - 80.0).abs() <= 0.02 * 80.0);
        let lo = radial_envelopes(&m, Direction::Lower, &[1.0, 10.0], 256).unwrap();
        assert!(lo.a_d[0] <= e.a_d[0] && lo.b_d[0] >= e.b_d[0]);
    }

    #[test]
    fn offset_integral_matches_closed_form() {
        let e = RadialEnvelope::from_fns(Direction::Upper, default_r_grid(1e6, 16), |r| 2.0 * r, |r| 1.5 / r).unwrap();
        for (y, t) in [(1.0f64, 9.0f64), (3.7, 1e-9), (1e5, 1e-6), (2.0, 1e8)] {
            let exact = 1.5 * (t / y).ln_1p();
            assert!((e.b_offset_integral(y, t) - exact).abs() <= 1e-12 * exact.abs().max(1e-300));
        }
        assert!((e.b_integral(10.0, 1.0) + 1.5 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn brownian_p_tests() {
        let m = bm(3);
        let e = radial_envelopes(&m, Direction::Upper, &default_r_grid(1e16, 16), 192).unwrap();
        let t = khasminskii_p_tests(&e, &radial_ladder()).unwrap();
        assert!(t.fc1);
        assert!((t.p_limit.outcome.value().unwrap() - 2.0).abs() < 1e-4);

        let m = bm(1);
        let e = radial_envelopes(&m, Direction::Upper, &default_r_grid(1e16, 16), 64).unwrap();
        let t = khasminskii_p_tests(&e, &radial_ladder()).unwrap();
        assert!(!t.fc1 && t.fc2, "{t:#?}");
    }

    #[test]
    fn quartic_reject_fires() {
        let m = Model::load(&one_dim_config(&["0"], &["1 + x1^4"], None, 1.0), 200).unwrap();
        let e = radial_envelopes(&m, Direction::Lower, &default_r_grid(1e16, 16), 64).unwrap();
        let t = khasminskii_p_tests(&e, &radial_ladder()).unwrap();
        assert!(t.reject, "{t:#?}");
    }

    #[test]
    fn growth_examples() {
        let ou = Model::load(&one_dim_config(&["-x1"], &["1"], None, 1.0), 200).unwrap();
        let g = growth_check(&ou);
        assert!(g.suff2 && g.existence);
        assert!((g.beta_witness - 1.0).abs() < 0.01, "{}", g.beta_witness);
        let q = Model::load(&one_dim_config(&["0"], &["1 + x1^4"], None, 1.0), 200).unwrap();
        assert!(!growth_check(&q).suff2);
        let g = growth_check(&bm(2));
        assert!(g.existence && (g.existence_constant - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_coefficient_ode() {
        let e = RadialEnvelope::from_fns(Direction::Upper, default_r_grid(100.0, 16), |_| 1.0, |_| 0.0).unwrap();
        let sol = solve_ode2(&e, 20.0).unwrap();
        assert!(sol.residual_max < 1e-6, "{}", sol.residual_max);
        for (r, u) in sol.grid.iter().zip(&sol.u) {
            let exact = (-(2f64.sqrt()) * (r - 0.5)).exp();
            assert!((u - exact).abs() < 1e-5, "{r}: {u} vs {exact}");
        }
        assert!(sol.decreasing);
    }

    #[test]
    fn brownian_ode_tends_to_zero() {
        let e = RadialEnvelope::from_fns(Direction::Upper, default_r_grid(1e5, 16), |r| 2.0 * r, |r| 0.5 / r).unwrap();
        let sol = solve_ode2(&e, 1e4).unwrap();
        assert!(sol.residual_max < 1e-6, "{}", sol.residual_max);
        assert!(sol.tail_limit_estimate < 1e-3);
        // Exact solution exp(-2(√r - √½)).
        for (r, u) in sol.grid.iter().zip(&sol.u).take(60) {
            let exact = (-2.0 * (r.sqrt() - 0.5f64.sqrt())).exp();
            assert!((u - exact).abs() <= 1e-6 * exact.max(1e-30), "{r}: {u} vs {exact}");
        }
    }

    #[test]
    fn quartic_ode_has_positive_limit() {
        let e = RadialEnvelope::from_fns(
            Direction::Lower,
            default_r_grid(1e5, 16),
            |r| 2.0 * r * (1.0 + 4.0 * r * r),
            |r| 0.5 / r,
        )
        .unwrap();
        let short = solve_ode2(&e, 1e3).unwrap();
        let long = solve_ode2(&e, 1e4).unwrap();
        assert!(short.residual_max < 1e-6 && long.residual_max < 1e-6, "{} {} {:?}", short.residual_max, long.residual_max, long.restarts);
        assert!(long.tail_limit_estimate > 0.05, "{}", long.tail_limit_estimate);
        assert_eq!(classify_u_limit(&short, &long), ULimit::Positive);
    }
}
