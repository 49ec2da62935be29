//! Integral tests for one-dimensional switching diffusions with
//! state-independent switching.
//!
//! Each environment is examined separately on both half-lines. The left
//! half-line is handled by reflection: `b̃(y) = -b(-y)`, `ã(y) = a(-y)`, so
//! every integrand below is written for `y ≥ 0`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ctmc::powerlaw_verdict;
use crate::expr::Expr;
use crate::model::{EnvSpace, Model, QMatrixSpec};
use crate::quadrature::{
    default_ladder, integrate_from_anchor, integrate_tol, probe_divergence_with, DivergenceVerdict, Outcome,
    PanelRange, ProbeOptions, QuadError,
};
use crate::sampling::halton_box;
use crate::verdict::{Evidence, FdOutcome, Prerequisites, Verdict};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassifyError {
    #[error("the 1D classifier needs dimension 1, model has {0}")]
    Dimension(usize),
    #[error("the 1D classifier needs state-independent switching")]
    StateDependentSwitching,
    #[error("environment {0} is absorbing (q_ii = 0)")]
    AbsorbingState(usize),
    #[error("diffusion coefficient is not positive at x = {x} in environment {env} (a = {value})")]
    NonPositiveDiffusion { x: f64, env: usize, value: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOptions {
    pub ladder: Vec<f64>,
    /// Per-rung relative tolerance of single integrals.
    pub tol: f64,
    /// Use the single integral `∫ u/a(u) du` when the drift is identically zero.
    pub driftless_shortcut: bool,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            ladder: default_ladder(),
            tol: 1e-8,
            driftless_shortcut: true,
        }
    }
}

impl ClassifyOptions {
    fn single(&self) -> ProbeOptions {
        ProbeOptions {
            segment_rel_tol: self.tol,
            ..ProbeOptions::default()
        }
    }

    fn outer(&self) -> ProbeOptions {
        ProbeOptions {
            segment_rel_tol: self.tol.max(1e-7),
            ..ProbeOptions::default()
        }
    }

    /// Inner integrals of nested tests run 1000 times tighter than the outer rung.
    fn inner_rel_tol(&self) -> f64 {
        1e-3 * self.outer().segment_rel_tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `x → +∞`
    Plus,
    /// `x → -∞`
    Minus,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Plus => 1.0,
            Side::Minus => -1.0,
        }
    }
}

/// Coefficients of one environment seen from one half-line.
struct Reflected<'m> {
    b: &'m Expr,
    a: &'m Expr,
    da: Expr,
    env: f64,
    sign: f64,
}

impl<'m> Reflected<'m> {
    fn new(model: &'m Model, env: usize, side: Side) -> Self {
        let a = model.diffusion_expr(env, 0, 0);
        Reflected {
            b: model.drift_expr(env, 0),
            a,
            da: a.differentiate(0),
            env: env as f64,
            sign: side.sign(),
        }
    }

    fn a(&self, y: f64) -> f64 {
        self.a.eval(&[self.sign * y], self.env)
    }

    fn beta(&self, y: f64) -> f64 {
        let x = [self.sign * y];
        self.sign * self.b.eval(&x, self.env) / self.a.eval(&x, self.env)
    }

    /// Width over which the nested integrands vary by O(1) near `y`.
    fn scale(&self, y: f64) -> f64 {
        let x = [self.sign * y];
        let a = self.a.eval(&x, self.env);
        let rate = (2.0 * self.beta(y) - self.sign * self.da.eval(&x, self.env) / a).abs();
        1.0 / rate.max(1.0 / (1.0 + y))
    }
}

const CACHE_END: f64 = 1e8;
const DIRECT_SUM_SPAN: usize = 64;
/// Offsets up to this fraction of `1 + y` are integrated directly.
const LOCAL_SPAN: f64 = 0.01;

/// Scale function data `G(y) = ∫₀^y b/a` for one environment and side,
/// cached at nodes `sinh(kδ)` with exact quadrature between nodes.
pub struct ScaleData<'m> {
    coeffs: Reflected<'m>,
    driftless: bool,
    delta: f64,
    nodes: Vec<f64>,
    increments: Vec<f64>,
    prefix: Vec<f64>,
    /// Largest relative change of `G` seen when the node grid was last refined.
    pub refinement_change: f64,
}

impl<'m> ScaleData<'m> {
    pub fn new(model: &'m Model, env: usize, side: Side) -> Result<Self, QuadError> {
        let coeffs = Reflected::new(model, env, side);
        let driftless = coeffs.b.is_zero();
        let mut data = ScaleData {
            coeffs,
            driftless,
            delta: 0.02,
            nodes: vec![0.0],
            increments: Vec::new(),
            prefix: vec![0.0],
            refinement_change: 0.0,
        };
        if driftless {
            return Ok(data);
        }
        data.build()?;
        let probes: Vec<f64> = (-1..=7).map(|k| 3.0 * 10f64.powi(k)).collect();
        loop {
            let coarse: Vec<f64> = probes.iter().map(|&y| data.g(y)).collect::<Result<_, _>>()?;
            data.delta *= 0.5;
            data.build()?;
            let change = probes
                .iter()
                .zip(&coarse)
                .map(|(&y, &g)| data.g(y).map(|f| (f - g).abs() / (1.0 + g.abs())))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .fold(0.0, f64::max);
            data.refinement_change = change;
            if change <= 1e-8 || data.delta < 1e-3 {
                break;
            }
        }
        Ok(data)
    }

    fn build(&mut self) -> Result<(), QuadError> {
        let k_max = (CACHE_END.asinh() / self.delta).ceil() as usize;
        self.nodes = (0..=k_max).map(|k| (k as f64 * self.delta).sinh()).collect();
        self.increments = self
            .nodes
            .windows(2)
            .map(|w| self.local(w[0], w[1]))
            .collect::<Result<_, _>>()?;
        self.prefix = std::iter::once(0.0)
            .chain(self.increments.iter().scan(0.0, |acc, d| {
                *acc += d;
                Some(*acc)
            }))
            .collect();
        Ok(())
    }

    fn local(&self, lo: f64, hi: f64) -> Result<f64, QuadError> {
        if hi <= lo {
            return Ok(0.0);
        }
        integrate_tol(|z| self.coeffs.beta(z), lo, hi, 0.0, 1e-13).map(|e| e.value)
    }

    fn node_index(&self, y: f64) -> usize {
        ((y.asinh() / self.delta).floor().max(0.0) as usize).min(self.nodes.len() - 1)
    }

    /// `G(y) = ∫₀^y b̃/ã`.
    pub fn g(&self, y: f64) -> Result<f64, QuadError> {
        if self.driftless {
            return Ok(0.0);
        }
        let k = self.node_index(y);
        Ok(self.prefix[k] + self.local(self.nodes[k], y)?)
    }

    /// `∫_u^y b̃/ã` for `0 ≤ u ≤ y`, summed piecewise so that short spans far
    /// from the origin do not cancel.
    pub fn log_ratio(&self, u: f64, y: f64) -> Result<f64, QuadError> {
        if self.driftless || y <= u {
            return Ok(0.0);
        }
        let (ku, ky) = (self.node_index(u), self.node_index(y));
        if ku == ky {
            return self.local(u, y);
        }
        let head = self.local(u, self.nodes[ku + 1])?;
        let tail = self.local(self.nodes[ky], y)?;
        let middle = if ky - (ku + 1) <= DIRECT_SUM_SPAN {
            self.increments[ku + 1..ky].iter().sum()
        } else {
            self.prefix[ky] - self.prefix[ku + 1]
        };
        Ok(head + middle + tail)
    }

    /// Scale density `s(y) = exp(-2G(y))`.
    pub fn density(&self, y: f64) -> Result<f64, QuadError> {
        Ok((-2.0 * self.g(y)?).exp())
    }

    /// `∫_y^{y + dir·t} b̃/ã`. Short offsets are integrated in the offset
    /// variable so that spans below the float spacing at `y` stay resolved.
    fn offset_integral(&self, y: f64, t: f64, dir: f64) -> Result<f64, QuadError> {
        if self.driftless || t <= 0.0 {
            return Ok(0.0);
        }
        if t <= LOCAL_SPAN * (1.0 + y) {
            return integrate_tol(|s| self.coeffs.beta(y + dir * s), 0.0, t, 0.0, 1e-13).map(|e| dir * e.value);
        }
        if dir > 0.0 {
            self.log_ratio(y, y + t)
        } else {
            self.log_ratio((y - t).max(0.0), y).map(|l| -l)
        }
    }

    /// `∫_y^∞ s(y)/(s(u) ã(u)) du`, the inner integral of the nested test.
    pub fn tail_speed(&self, y: f64, rel_tol: f64) -> Result<f64, QuadError> {
        let f = |t: f64| match self.offset_integral(y, t, 1.0) {
            Ok(l) => (2.0 * l).exp() / self.coeffs.a(y + t),
            Err(_) => f64::NAN,
        };
        integrate_from_anchor(f, 0.0, PanelRange::RightToInfinity, self.coeffs.scale(y), rel_tol).map(|e| e.value)
    }

    /// `∫₀^y 2 s(y)/(s(u) ã(u)) du`, the inner integral of the non-explosion test.
    pub fn explosion_inner(&self, y: f64, rel_tol: f64) -> Result<f64, QuadError> {
        if y <= 0.0 {
            return Ok(0.0);
        }
        let f = |t: f64| match self.offset_integral(y, t, -1.0) {
            Ok(l) => 2.0 * (2.0 * l).exp() / self.coeffs.a((y - t).max(0.0)),
            Err(_) => f64::NAN,
        };
        integrate_from_anchor(f, 0.0, PanelRange::RightTo(y), self.coeffs.scale(y), rel_tol).map(|e| e.value)
    }
}

/// Maps an inner-integral failure to an outer integrand value: overflow and
/// unbounded tails mean `+∞`, anything else is a numeric failure.
fn inner_value(r: Result<f64, QuadError>) -> f64 {
    match r {
        Ok(v) => v,
        Err(e) if e.is_positive_overflow() => f64::INFINITY,
        Err(QuadError::TailNotConverged { .. }) => f64::INFINITY,
        Err(_) => f64::NAN,
    }
}

fn probe_or_inconclusive(
    result: Result<DivergenceVerdict, QuadError>,
) -> Result<DivergenceVerdict, ClassifyError> {
    match result {
        Ok(v) => Ok(v),
        Err(QuadError::MaxSubdivisions { lo, hi, .. }) => Ok(DivergenceVerdict::inconclusive(format!(
            "quadrature did not resolve the integrand on [{lo}, {hi}]"
        ))),
        Err(e) => Err(e.into()),
    }
}

/// `∫₀^∞ s`: converges for (a1)/(b1).
fn scale_test(data: &ScaleData, opts: &ClassifyOptions) -> Result<DivergenceVerdict, ClassifyError> {
    probe_or_inconclusive(probe_divergence_with(
        |y| data.density(y).unwrap_or(f64::NAN),
        0.0,
        &opts.ladder,
        &opts.single(),
    ))
}

/// The nested integral of (a2)/(b2): `∫₀^∞ s(y) ∫_y^∞ 1/(s(u) a(u)) du dy`.
fn nested_test(data: &ScaleData, opts: &ClassifyOptions) -> Result<DivergenceVerdict, ClassifyError> {
    let inner_total = probe_or_inconclusive(probe_divergence_with(
        |u| match data.g(u) {
            Ok(g) => (2.0 * g).exp() / data.coeffs.a(u),
            Err(_) => f64::NAN,
        },
        0.0,
        &opts.ladder,
        &opts.single(),
    ))?;
    match inner_total.outcome {
        Outcome::Diverges => {
            return Ok(DivergenceVerdict {
                rationale: format!("inner integral from 0 diverges ({})", inner_total.rationale),
                ..inner_total
            })
        }
        Outcome::Inconclusive => {
            return Ok(DivergenceVerdict {
                rationale: format!("inner integral from 0 undecided ({})", inner_total.rationale),
                ..inner_total
            })
        }
        Outcome::Converges(_) => {}
    }
    let tol = opts.inner_rel_tol();
    probe_or_inconclusive(probe_divergence_with(
        |y| inner_value(data.tail_speed(y, tol)),
        0.0,
        &opts.ladder,
        &opts.outer(),
    ))
}

fn driftless_test(model: &Model, env: usize, side: Side, opts: &ClassifyOptions) -> Result<DivergenceVerdict, ClassifyError> {
    let c = Reflected::new(model, env, side);
    probe_or_inconclusive(probe_divergence_with(|u| u / c.a(u), 0.0, &opts.ladder, &opts.single()))
}

/// Non-explosion test on both half-lines; the process does not explode iff both diverge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonExplosion {
    pub plus: DivergenceVerdict,
    pub minus: DivergenceVerdict,
}

impl NonExplosion {
    /// `Some(true)` when both sides diverge, `Some(false)` when one converges.
    pub fn holds(&self) -> Option<bool> {
        match (&self.plus.outcome, &self.minus.outcome) {
            (Outcome::Diverges, Outcome::Diverges) => Some(true),
            (Outcome::Converges(_), _) | (_, Outcome::Converges(_)) => Some(false),
            _ => None,
        }
    }
}

fn explosion_side(model: &Model, env: usize, side: Side, opts: &ClassifyOptions) -> Result<DivergenceVerdict, ClassifyError> {
    let data = ScaleData::new(model, env, side)?;
    let tol = opts.inner_rel_tol();
    probe_or_inconclusive(probe_divergence_with(
        |y| inner_value(data.explosion_inner(y, tol)),
        0.0,
        &opts.ladder,
        &opts.outer(),
    ))
}

fn check_one_dim(model: &Model) -> Result<(), ClassifyError> {
    if model.dim() != 1 {
        return Err(ClassifyError::Dimension(model.dim()));
    }
    Ok(())
}

/// Checks `a(x, env) > 0` on the sampling box and at the ladder points.
fn check_positive_diffusion(model: &Model, env: usize, opts: &ClassifyOptions) -> Result<(), ClassifyError> {
    let a = model.diffusion_expr(env, 0, 0);
    let sample = halton_box(model.sampling_box(), crate::model::VALIDATION_POINTS);
    let ladder = opts.ladder.iter().flat_map(|r| [*r, -*r]).chain([0.0]);
    for x in sample.iter().map(|p| p[0]).chain(ladder) {
        let value = a.eval(&[x], env as f64);
        if !(value > 0.0) {
            return Err(ClassifyError::NonPositiveDiffusion { x, env, value });
        }
    }
    Ok(())
}

pub fn feller_nonexplosion_test(model: &Model, env: usize, opts: &ClassifyOptions) -> Result<NonExplosion, ClassifyError> {
    check_one_dim(model)?;
    check_positive_diffusion(model, env, opts)?;
    let (plus, minus) = rayon::join(
        || explosion_side(model, env, Side::Plus, opts),
        || explosion_side(model, env, Side::Minus, opts),
    );
    Ok(NonExplosion {
        plus: plus?,
        minus: minus?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvStatus {
    Passes,
    Fails,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvClassification {
    pub env: usize,
    pub status: EnvStatus,
    pub evidence: Vec<Evidence>,
}

fn side_status(first: &Outcome, second: Option<&Outcome>) -> EnvStatus {
    match (first, second) {
        (Outcome::Converges(_), _) => EnvStatus::Passes,
        (Outcome::Diverges, Some(Outcome::Diverges)) => EnvStatus::Passes,
        (Outcome::Diverges, Some(Outcome::Converges(_))) => EnvStatus::Fails,
        _ => EnvStatus::Undecided,
    }
}

fn classify_side(
    model: &Model,
    env: usize,
    side: Side,
    opts: &ClassifyOptions,
) -> Result<(EnvStatus, Vec<Evidence>), ClassifyError> {
    let (first, second) = match side {
        Side::Plus => ("a1", "a2"),
        Side::Minus => ("b1", "b2"),
    };
    let evidence = |test: &str, verdict: DivergenceVerdict| Evidence {
        test: test.to_string(),
        env: Some(env),
        verdict,
    };
    if opts.driftless_shortcut && model.drift_vanishes(env) {
        let v = driftless_test(model, env, side, opts)?;
        let status = match v.outcome {
            Outcome::Diverges => EnvStatus::Passes,
            Outcome::Converges(_) => EnvStatus::Fails,
            Outcome::Inconclusive => EnvStatus::Undecided,
        };
        let name = match side {
            Side::Plus => "driftless_plus",
            Side::Minus => "driftless_minus",
        };
        return Ok((status, vec![evidence(name, v)]));
    }
    let data = ScaleData::new(model, env, side)?;
    let a1 = scale_test(&data, opts)?;
    if a1.outcome.converges() || !a1.outcome.is_definite() {
        let status = side_status(&a1.outcome, None);
        return Ok((status, vec![evidence(first, a1)]));
    }
    let a2 = nested_test(&data, opts)?;
    let status = side_status(&a1.outcome, Some(&a2.outcome));
    Ok((status, vec![evidence(first, a1), evidence(second, a2)]))
}

/// Equivalent integral tests for one environment, both half-lines.
pub fn classify_env(model: &Model, env: usize, opts: &ClassifyOptions) -> Result<EnvClassification, ClassifyError> {
    check_one_dim(model)?;
    check_positive_diffusion(model, env, opts)?;
    let (plus, minus) = rayon::join(
        || classify_side(model, env, Side::Plus, opts),
        || classify_side(model, env, Side::Minus, opts),
    );
    let (plus, minus) = (plus?, minus?);
    let status = match (plus.0, minus.0) {
        (EnvStatus::Fails, _) | (_, EnvStatus::Fails) => EnvStatus::Fails,
        (EnvStatus::Passes, EnvStatus::Passes) => EnvStatus::Passes,
        _ => EnvStatus::Undecided,
    };
    let mut evidence = plus.1;
    evidence.extend(minus.1);
    Ok(EnvClassification { env, status, evidence })
}

fn coefficients_continuous(model: &Model, envs: &[usize]) -> bool {
    envs.iter().all(|&e| model.drift_expr(e, 0).is_continuous() && model.diffusion_expr(e, 0, 0).is_continuous())
}

/// Full 1D classification: non-explosion prerequisite plus the equivalent
/// integral tests in every environment.
pub fn classify_fd_1d(model: &Model, opts: &ClassifyOptions) -> Result<Verdict, ClassifyError> {
    check_one_dim(model)?;
    let mut notes = vec!["Hölder regularity of the diffusion root is assumed, not verified".to_string()];
    let chain_fd = match model.q() {
        QMatrixSpec::StateDependent(_) => return Err(ClassifyError::StateDependentSwitching),
        QMatrixSpec::Dense(_) => {
            for env in model.env_labels() {
                if model.q().exit_rate(env, &[0.0]) == 0.0 {
                    return Err(ClassifyError::AbsorbingState(env));
                }
            }
            true
        }
        QMatrixSpec::BirthDeath(r) => powerlaw_verdict(r.alpha, r.lambda, r.mu),
    };
    // Environments sharing identical coefficients are evaluated once.
    let labels = model.env_labels();
    let truncated = matches!(model.env_space(), EnvSpace::BirthDeath(_));
    let envs: Vec<usize> = if truncated && !model.coefficients_use_env() {
        notes.push(format!(
            "coefficients do not depend on i; environment {} represents all of 0..={}",
            labels[0],
            model.n_max()
        ));
        vec![labels[0]]
    } else {
        labels.clone()
    };
    if truncated {
        notes.push(format!("countable environment space truncated at n_max = {}", model.n_max()));
        if !chain_fd {
            notes.push("birth-death rates violate the power-law Feller-Dynkin condition".into());
        }
    }
    let results: Vec<(usize, NonExplosion, EnvClassification)> = envs
        .par_iter()
        .map(|&env| {
            let fc = feller_nonexplosion_test(model, env, opts)?;
            let cls = classify_env(model, env, opts)?;
            Ok((env, fc, cls))
        })
        .collect::<Result<_, ClassifyError>>()?;

    let mut prerequisites = Prerequisites {
        cb_feller_assumed: coefficients_continuous(model, &envs),
        chain_fd_assumed: chain_fd,
        holder_assumed: true,
        ..Prerequisites::default()
    };
    let mut evidence = Vec::new();
    let mut fc_ok = true;
    let mut any_fail = false;
    let mut all_pass = true;
    for (env, fc, cls) in results {
        let holds = fc.holds();
        prerequisites.feller_nonexplosion.insert(env, holds == Some(true));
        fc_ok &= holds == Some(true);
        evidence.push(Evidence {
            test: "fc_plus".into(),
            env: Some(env),
            verdict: fc.plus,
        });
        evidence.push(Evidence {
            test: "fc_minus".into(),
            env: Some(env),
            verdict: fc.minus,
        });
        any_fail |= cls.status == EnvStatus::Fails;
        all_pass &= cls.status == EnvStatus::Passes;
        evidence.extend(cls.evidence);
    }
    let outcome = if !fc_ok {
        notes.push("non-explosion prerequisite not established; the equivalence does not apply".into());
        FdOutcome::Inconclusive
    } else if any_fail {
        FdOutcome::NotFellerDynkin
    } else if all_pass && truncated && model.coefficients_use_env() {
        notes.push("every truncated environment passes, but the verdict depends on the truncation".into());
        FdOutcome::Inconclusive
    } else if all_pass {
        FdOutcome::FellerDynkin
    } else {
        FdOutcome::Inconclusive
    };
    if !prerequisites.cb_feller_assumed {
        notes.push("coefficients may be discontinuous; C_b-Feller property not assumed".into());
    }
    Ok(Verdict {
        outcome,
        evidence,
        prerequisites,
        notes,
    })
}
