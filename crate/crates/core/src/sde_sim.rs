//! Switching-diffusion path simulation.
//!
//! With state-independent switching the chain is simulated exactly first and
//! the diffusion is advanced by tamed Euler–Maruyama inside each sojourn,
//! landing exactly on the jump times. State-dependent switching uses a joint
//! small-step scheme with per-step Bernoulli thinning (bias `O(dt)`).

use std::io::{self, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ctmc::{simulate_chain, ChainError};
use crate::linalg::{matrix_root, SquareMatrix};
use crate::model::Model;
use crate::rng::{StreamId, Substream};
use crate::sampling::halton_box;

/// Paths whose norm passes this bound are flagged exploded and stopped.
pub const EXPLOSION_BOUND: f64 = 1e150;

/// Largest allowed `rate · dt` for the thinning scheme.
pub const MAX_JUMP_PROBABILITY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("dt must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("exact chain simulation needs state-independent switching")]
    StateDependent,
    #[error("max exit rate {rate} times dt = {product} exceeds {MAX_JUMP_PROBABILITY}")]
    StepTooLarge { rate: f64, product: f64 },
    #[error("diffusion matrix is not positive semidefinite at x = {x:?}, env {env}, t = {t}")]
    NotPsd { x: Vec<f64>, env: usize, t: f64 },
    #[error(transparent)]
    Chain(#[from] ChainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SegmentExact,
    JointSmallStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpRecord {
    pub t: f64,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Path {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major `times.len() × dim` samples.
    pub ys: Vec<f64>,
    /// Environment in force from each grid time on.
    pub envs: Vec<usize>,
    pub jumps: Vec<JumpRecord>,
    pub stream: StreamId,
    pub dt_base: f64,
    pub scheme: Scheme,
    /// Time at which the path left the representable range.
    pub exploded_at: Option<f64>,
}

impl Path {
    pub fn y(&self, k: usize) -> &[f64] {
        &self.ys[k * self.dim..(k + 1) * self.dim]
    }

    pub fn final_y(&self) -> &[f64] {
        self.y(self.times.len() - 1)
    }

    pub fn final_env(&self) -> usize {
        *self.envs.last().expect("path has an initial point")
    }

    pub fn exploded(&self) -> bool {
        self.exploded_at.is_some()
    }
}

/// What a run reports besides the observed samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub jumps: Vec<JumpRecord>,
    pub exploded_at: Option<f64>,
    /// Set when the observer asked to stop early.
    pub stopped_at: Option<f64>,
}

/// Per-step working memory for the Euler–Maruyama update.
struct Stepper<'m> {
    model: &'m Model,
    b: Vec<f64>,
    a: SquareMatrix,
    xi: Vec<f64>,
}

enum StepResult {
    Ok,
    Exploded,
}

impl<'m> Stepper<'m> {
    fn new(model: &'m Model) -> Self {
        let d = model.dim();
        Stepper {
            model,
            b: vec![0.0; d],
            a: SquareMatrix::zeros(d),
            xi: vec![0.0; d],
        }
    }

    /// Evaluates the coefficients at `y` and returns the tamed step size.
    fn prepare(&mut self, y: &[f64], env: usize, dt: f64) -> f64 {
        self.model.drift_into(y, env, &mut self.b);
        self.model.diffusion_into(y, env, &mut self.a);
        let nb = self.b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = 1.0 + nb + self.a.trace();
        if scale.is_finite() {
            dt.min(dt / scale)
        } else {
            dt
        }
    }

    /// `y ← y + b h + L √h ξ` with coefficients from the last `prepare`.
    fn advance(&mut self, y: &mut [f64], env: usize, h: f64, t: f64, rng: &mut ChaCha8Rng) -> Result<StepResult, SimError> {
        let d = y.len();
        for v in self.xi.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let sq = h.sqrt();
        if d == 1 {
            let a = self.a[(0, 0)];
            let l = if a >= 0.0 {
                a.sqrt()
            } else if a >= -1e-9 * a.abs() || a == 0.0 {
                0.0
            } else if a.is_nan() {
                return Ok(StepResult::Exploded);
            } else {
                return Err(SimError::NotPsd { x: y.to_vec(), env, t });
            };
            y[0] += self.b[0] * h + l * sq * self.xi[0];
        } else {
            if self.a.as_slice().iter().any(|v| !v.is_finite()) {
                return Ok(StepResult::Exploded);
            }
            let root = matrix_root(&self.a).map_err(|_| SimError::NotPsd { x: y.to_vec(), env, t })?;
            for (r, yr) in y.iter_mut().enumerate() {
                let mut noise = 0.0;
                for c in 0..=r {
                    noise += root.factor[(r, c)] * self.xi[c];
                }
                *yr += self.b[r] * h + sq * noise;
            }
        }
        let norm2: f64 = y.iter().map(|v| v * v).sum();
        if !norm2.is_finite() || norm2.sqrt() > EXPLOSION_BOUND {
            return Ok(StepResult::Exploded);
        }
        Ok(StepResult::Ok)
    }
}

fn check_dt(dt: f64) -> Result<(), SimError> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(SimError::BadStep(dt))
    }
}

/// Runs the segment-exact scheme, calling `observe(t, y, env)` at every grid
/// time (including `0`, each jump time and `t_end`). Returning `false`
/// stops the run.
pub fn run_state_independent(
    model: &Model,
    x0: &[f64],
    i0: usize,
    t_end: f64,
    dt: f64,
    stream: StreamId,
    mut observe: impl FnMut(f64, &[f64], usize) -> bool,
) -> Result<RunSummary, SimError> {
    check_dt(dt)?;
    if !model.q().is_state_independent() {
        return Err(SimError::StateDependent);
    }
    let mut chain_rng = stream.rng(Substream::Chain);
    let chain = simulate_chain(model.q(), i0, t_end, &mut chain_rng)?;
    let mut rng = stream.rng(Substream::Brownian);
    let mut stepper = Stepper::new(model);
    let mut y = x0.to_vec();
    let mut summary = RunSummary {
        jumps: Vec::with_capacity(chain.jumps()),
        exploded_at: None,
        stopped_at: None,
    };
    if !observe(0.0, &y, i0) {
        summary.stopped_at = Some(0.0);
        return Ok(summary);
    }
    let mut t = 0.0;
    for n in 0..chain.states.len() {
        let env = chain.states[n];
        let seg_end = chain.times.get(n + 1).copied().unwrap_or(t_end);
        while t < seg_end {
            let h = stepper.prepare(&y, env, dt).min(seg_end - t);
            let landing = h >= seg_end - t;
            match stepper.advance(&mut y, env, h, t, &mut rng)? {
                StepResult::Ok => {}
                StepResult::Exploded => {
                    summary.exploded_at = Some(t + h);
                    return Ok(summary);
                }
            }
            t = if landing { seg_end } else { t + h };
            let env_now = if landing && n + 1 < chain.states.len() {
                chain.states[n + 1]
            } else {
                env
            };
            if landing && n + 1 < chain.states.len() {
                summary.jumps.push(JumpRecord { t, from: env, to: env_now });
            }
            if !observe(t, &y, env_now) {
                summary.stopped_at = Some(t);
                return Ok(summary);
            }
        }
    }
    Ok(summary)
}

/// Largest `-q_ii(x)` over the sampling box, its centre and all environments.
pub fn max_exit_rate(model: &Model) -> f64 {
    let mut pts = halton_box(model.sampling_box(), crate::model::VALIDATION_POINTS);
    pts.push(model.sampling_box().iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect());
    let q = model.q();
    model
        .env_labels()
        .into_iter()
        .flat_map(|i| pts.iter().map(move |x| q.exit_rate(i, x)))
        .fold(0.0, f64::max)
}

/// Joint small-step scheme: per step, jump with probability `-q_ii(Y) h`
/// (target `j` with probability `q_ij/(-q_ii)`), then one Euler–Maruyama
/// step in the current environment.
pub fn run_state_dependent(
    model: &Model,
    x0: &[f64],
    i0: usize,
    t_end: f64,
    dt: f64,
    stream: StreamId,
    mut observe: impl FnMut(f64, &[f64], usize) -> bool,
) -> Result<RunSummary, SimError> {
    check_dt(dt)?;
    let rate = max_exit_rate(model);
    if rate * dt > MAX_JUMP_PROBABILITY {
        return Err(SimError::StepTooLarge { rate, product: rate * dt });
    }
    let mut chain_rng = stream.rng(Substream::Chain);
    let mut rng = stream.rng(Substream::Brownian);
    let mut stepper = Stepper::new(model);
    let q = model.q();
    let mut y = x0.to_vec();
    let mut env = i0;
    let mut summary = RunSummary {
        jumps: Vec::new(),
        exploded_at: None,
        stopped_at: None,
    };
    if !observe(0.0, &y, env) {
        summary.stopped_at = Some(0.0);
        return Ok(summary);
    }
    let mut t = 0.0;
    while t < t_end {
        let h = stepper.prepare(&y, env, dt).min(t_end - t);
        let u: f64 = chain_rng.random();
        let exit = q.exit_rate(env, &y);
        if u < exit * h {
            let mut v = chain_rng.random::<f64>() * exit;
            let out = q.off_diagonal(env, &y);
            let mut target = out[out.len() - 1].0;
            for (j, r) in &out {
                if v < *r {
                    target = *j;
                    break;
                }
                v -= r;
            }
            summary.jumps.push(JumpRecord { t, from: env, to: target });
            env = target;
            // The coefficients change with the environment.
            stepper.prepare(&y, env, dt);
        }
        match stepper.advance(&mut y, env, h, t, &mut rng)? {
            StepResult::Ok => {}
            StepResult::Exploded => {
                summary.exploded_at = Some(t + h);
                return Ok(summary);
            }
        }
        t = if h >= t_end - t { t_end } else { t + h };
        if !observe(t, &y, env) {
            summary.stopped_at = Some(t);
            return Ok(summary);
        }
    }
    Ok(summary)
}

/// Segment-exact when switching is state-independent, joint small-step otherwise.
pub fn run_path(
    model: &Model,
    x0: &[f64],
    i0: usize,
    t_end: f64,
    dt: f64,
    stream: StreamId,
    observe: impl FnMut(f64, &[f64], usize) -> bool,
) -> Result<RunSummary, SimError> {
    if model.q().is_state_independent() {
        run_state_independent(model, x0, i0, t_end, dt, stream, observe)
    } else {
        run_state_dependent(model, x0, i0, t_end, dt, stream, observe)
    }
}

fn record(
    scheme: Scheme,
    model: &Model,
    x0: &[f64],
    i0: usize,
    t_end: f64,
    dt: f64,
    stream: StreamId,
) -> Result<Path, SimError> {
    let mut times = Vec::new();
    let mut ys = Vec::new();
    let mut envs = Vec::new();
    let observe = |t: f64, y: &[f64], e: usize| {
        times.push(t);
        ys.extend_from_slice(y);
        envs.push(e);
        true
    };
    let summary = match scheme {
        Scheme::SegmentExact => run_state_independent(model, x0, i0, t_end, dt, stream, observe)?,
        Scheme::JointSmallStep => run_state_dependent(model, x0, i0, t_end, dt, stream, observe)?,
    };
    Ok(Path {
        dim: model.dim(),
        times,
        ys,
        envs,
        jumps: summary.jumps,
        stream,
        dt_base: dt,
        scheme,
        exploded_at: summary.exploded_at,
    })
}

pub fn simulate_path_state_independent(
    model: &Model,
    x0: &[f64],
    i0: usize,
    t_end: f64,
    dt: f64,
    stream: StreamId,
) -> Result<Path, SimError> {
    record(Scheme::SegmentExact, model, x0, i0, t_end, dt, stream)
}

pub fn simulate_path_state_dependent(
    model: &Model,
    x0: &[f64],
    i0: usize,
    t_end: f64,
    dt: f64,
    stream: StreamId,
) -> Result<Path, SimError> {
    record(Scheme::JointSmallStep, model, x0, i0, t_end, dt, stream)
}

pub fn simulate_path(model: &Model, x0: &[f64], i0: usize, t_end: f64, dt: f64, stream: StreamId) -> Result<Path, SimError> {
    let scheme = if model.q().is_state_independent() {
        Scheme::SegmentExact
    } else {
        Scheme::JointSmallStep
    };
    record(scheme, model, x0, i0, t_end, dt, stream)
}

/// `n_paths` recorded paths, path `k` on stream `(master_seed, k)`.
pub fn simulate_paths(
    model: &Model,
    x0: &[f64],
    i0: usize,
    t_end: f64,
    dt: f64,
    master_seed: u64,
    n_paths: usize,
) -> Result<Vec<Path>, SimError> {
    (0..n_paths as u64)
        .into_par_iter()
        .map(|k| simulate_path(model, x0, i0, t_end, dt, StreamId::new(master_seed, k)))
        .collect()
}

/// State at `t_end` (or at explosion) of path `stream`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Terminal {
    pub y: Vec<f64>,
    pub env: usize,
    pub exploded: bool,
}

pub fn terminal_state(model: &Model, x0: &[f64], i0: usize, t_end: f64, dt: f64, stream: StreamId) -> Result<Terminal, SimError> {
    let mut last = (x0.to_vec(), i0);
    let summary = run_path(model, x0, i0, t_end, dt, stream, |_, y, e| {
        last.0.copy_from_slice(y);
        last.1 = e;
        true
    })?;
    Ok(Terminal {
        y: last.0,
        env: last.1,
        exploded: summary.exploded_at.is_some(),
    })
}

/// Writes `t,y1..yd,env,stream_id` rows, paths in the given order.
pub fn write_csv<W: Write>(paths: &[Path], mut out: W) -> io::Result<()> {
    let d = paths.first().map_or(1, |p| p.dim);
    let mut header = String::from("t");
    for k in 1..=d {
        header.push_str(&format!(",y{k}"));
    }
    header.push_str(",env,stream_id\n");
    out.write_all(header.as_bytes())?;
    let mut line = String::new();
    for p in paths {
        for k in 0..p.times.len() {
            line.clear();
            line.push_str(&p.times[k].to_string());
            for v in p.y(k) {
                line.push(',');
                line.push_str(&v.to_string());
            }
            line.push_str(&format!(",{},{}\n", p.envs[k], p.stream.path_index));
            out.write_all(line.as_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{one_dim_config, ModelConfig};

    fn ou2() -> Model {
        Model::load(
            &one_dim_config(&["-x1", "-x1"], &["1", "1"], Some(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]), 2.0),
            200,
        )
        .unwrap()
    }

    #[test]
    fn frozen_motion_stays_put() {
        let m = Model::load(&one_dim_config(&["0"], &["0"], None, 1.0), 200).unwrap();
        let p = simulate_path(&m, &[0.7], 1, 1.0, 1e-2, StreamId::new(1, 0)).unwrap();
        assert!(p.ys.iter().all(|&v| v == 0.7));
        assert_eq!(*p.times.last().unwrap(), 1.0);
    }

    #[test]
    fn paths_are_reproducible_and_continuous() {
        let m = ou2();
        let a = simulate_path(&m, &[2.0], 1, 3.0, 1e-2, StreamId::new(9, 4)).unwrap();
        let b = simulate_path(&m, &[2.0], 1, 3.0, 1e-2, StreamId::new(9, 4)).unwrap();
        assert_eq!(a, b);
        assert!(!a.jumps.is_empty());
        for j in &a.jumps {
            let k = a.times.iter().position(|&t| t == j.t).expect("jump time is a grid time");
            assert_eq!(a.envs[k], j.to);
            assert_eq!(a.envs[k - 1], j.from);
        }
        assert!(a.times.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*a.times.last().unwrap(), 3.0);
    }

    #[test]
    fn ou_mean_small_sample() {
        let m = ou2();
        let n = 4000;
        let ys: Vec<f64> = (0..n)
            .map(|k| terminal_state(&m, &[2.0], 1, 1.0, 1e-3, StreamId::new(42, k)).unwrap().y[0])
            .collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let exact_var = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((mean - 2.0 * (-1.0f64).exp()).abs() < 3.0 * (exact_var / n as f64).sqrt());
        assert!((var - exact_var).abs() < 0.05);
    }

    #[test]
    fn state_dependent_step_bound() {
        let cfg = ModelConfig {
            qmatrix: Some(crate::model::QMatrixConfig::Dense(vec![vec![-200.0, 200.0], vec![1.0, -1.0]])),
            ..one_dim_config(&["0", "0"], &["1", "1"], None, 1.0)
        };
        let m = Model::load(&cfg, 200).unwrap();
        let err = simulate_path_state_dependent(&m, &[0.0], 1, 1.0, 1e-3, StreamId::new(1, 0)).unwrap_err();
        assert!(matches!(err, SimError::StepTooLarge { .. }));
    }

    #[test]
    fn no_switching_keeps_environment() {
        let cfg = ModelConfig {
            qmatrix: Some(crate::model::QMatrixConfig::Dense(vec![vec![0.0, 0.0], vec![0.0, 0.0]])),
            ..one_dim_config(&["0", "0"], &["1", "1"], None, 1.0)
        };
        let m = Model::load(&cfg, 200).unwrap();
        let p = simulate_path_state_dependent(&m, &[0.0], 2, 1.0, 1e-2, StreamId::new(1, 0)).unwrap();
        assert!(p.envs.iter().all(|&e| e == 2));
    }

    #[test]
    fn csv_layout() {
        let m = ou2();
        let paths = simulate_paths(&m, &[1.0], 1, 0.05, 1e-2, 3, 2).unwrap();
        let mut buf = Vec::new();
        write_csv(&paths, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,y1,env,stream_id"));
        assert_eq!(lines.next(), Some("0,1,1,0"));
        assert_eq!(text.lines().count(), 1 + paths.iter().map(|p| p.times.len()).sum::<usize>());
        assert!(text.lines().last().unwrap().ends_with(",1"));
    }

    #[test]
    fn quartic_paths_stay_finite() {
        let m = Model::load(&one_dim_config(&["0"], &["1 + x1^4"], None, 1.0), 200).unwrap();
        for k in 0..20 {
            let t = terminal_state(&m, &[3.0], 1, 1.0, 1e-3, StreamId::new(5, k)).unwrap();
            assert!(!t.exploded && t.y[0].is_finite());
        }
    }
}
