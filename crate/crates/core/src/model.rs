//! Validated switching-diffusion model: drift `b(x,i)`, diffusion `a(x,i)`
//! and the Q-matrix of the environment chain.
//!
//! Environments of a finite model are labelled `1..=N`. A birth-death chain
//! has the countable state space `{0, 1, 2, …}`; analyses truncate it at
//! `n_max`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse_expression, Expr, ParseError};
use crate::linalg::{matrix_root, SquareMatrix};
use crate::sampling::halton_box;

/// Number of quasi-random points used to validate a model.
pub const VALIDATION_POINTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub env: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationKind {
    NotPsd,
    RowSumNonzero,
    NegativeRate,
    BadExpression,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{kind:?} at x = {:?}, env {}: {}", witness.x, witness.env, witness.detail)]
    Validation {
        kind: ValidationKind,
        witness: Witness,
    },
    #[error("cannot parse `{text}`: {source}")]
    Parse {
        text: String,
        #[source]
        source: ParseError,
    },
    #[error("malformed model: {0}")]
    Shape(String),
}

impl ModelError {
    pub fn kind(&self) -> Option<ValidationKind> {
        match self {
            ModelError::Validation { kind, .. } => Some(*kind),
            ModelError::Parse { .. } => Some(ValidationKind::BadExpression),
            ModelError::Shape(_) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration documents

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BirthDeathRates {
    pub alpha: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl BirthDeathRates {
    /// Birth rate `λ_n = n^α λ`; state 0 uses `λ_0 = λ` so that it is not absorbing.
    pub fn birth(&self, n: usize) -> f64 {
        (n.max(1) as f64).powf(self.alpha) * self.lambda
    }

    /// Death rate `μ_n = n^α μ`, `μ_0 = 0`.
    pub fn death(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            (n as f64).powf(self.alpha) * self.mu
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvironmentsConfig {
    Count(usize),
    BirthDeath { birth_death: BirthDeathRates },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QMatrixConfig {
    Dense(Vec<Vec<f64>>),
    StateDependent(Vec<Vec<String>>),
    BirthDeath(BirthDeathRates),
}

/// The model part of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dimension: usize,
    pub environments: EnvironmentsConfig,
    /// One drift vector per environment, or a single one shared by all.
    pub drift: Vec<Vec<String>>,
    /// One `d×d` matrix per environment (upper triangle used), or a single shared one.
    pub diffusion: Vec<Vec<Vec<String>>>,
    #[serde(default)]
    pub qmatrix: Option<QMatrixConfig>,
    pub sampling_box: Vec<[f64; 2]>,
}

// ---------------------------------------------------------------------------
// Validated model

#[derive(Debug, Clone, PartialEq)]
pub enum QMatrixSpec {
    Dense(Vec<Vec<f64>>),
    BirthDeath(BirthDeathRates),
    StateDependent(Vec<Vec<Expr>>),
}

impl QMatrixSpec {
    pub fn is_state_independent(&self) -> bool {
        !matches!(self, QMatrixSpec::StateDependent(_))
    }

    /// Finite number of states, `None` for a birth-death chain.
    pub fn n_states(&self) -> Option<usize> {
        match self {
            QMatrixSpec::Dense(rows) => Some(rows.len()),
            QMatrixSpec::StateDependent(rows) => Some(rows.len()),
            QMatrixSpec::BirthDeath(_) => None,
        }
    }

    /// Label of the first state: 1 for finite chains, 0 for birth-death.
    pub fn first_label(&self) -> usize {
        match self {
            QMatrixSpec::BirthDeath(_) => 0,
            _ => 1,
        }
    }

    /// Nonzero off-diagonal rates `(j, q_ij(x))` out of state `i`.
    pub fn off_diagonal(&self, i: usize, x: &[f64]) -> Vec<(usize, f64)> {
        match self {
            QMatrixSpec::Dense(rows) => rows[i - 1]
                .iter()
                .enumerate()
                .filter(|(j, q)| *j != i - 1 && **q != 0.0)
                .map(|(j, q)| (j + 1, *q))
                .collect(),
            QMatrixSpec::StateDependent(rows) => {
                let row = &rows[i - 1];
                let out: Vec<(usize, f64)> = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i - 1)
                    .map(|(j, e)| (j + 1, e.eval(x, i as f64)))
                    .filter(|(_, q)| *q != 0.0)
                    .collect();
                if cfg!(debug_assertions) {
                    let diag = row[i - 1].eval(x, i as f64);
                    let sum: f64 = out.iter().map(|(_, q)| q).sum::<f64>() + diag;
                    let scale = 1.0 + diag.abs();
                    debug_assert!(out.iter().all(|(_, q)| *q >= -1e-12 * scale), "negative rate at {x:?}");
                    debug_assert!(sum.abs() <= 1e-9 * scale, "row {i} sums to {sum} at {x:?}");
                }
                out
            }
            QMatrixSpec::BirthDeath(r) => {
                let mut out = vec![(i + 1, r.birth(i))];
                if i > 0 {
                    out.push((i - 1, r.death(i)));
                }
                out
            }
        }
    }

    /// `q_ij(x)`, including the diagonal.
    pub fn rate(&self, i: usize, j: usize, x: &[f64]) -> f64 {
        match self {
            QMatrixSpec::Dense(rows) => rows[i - 1][j - 1],
            QMatrixSpec::StateDependent(rows) => rows[i - 1][j - 1].eval(x, i as f64),
            QMatrixSpec::BirthDeath(r) => {
                if j == i + 1 {
                    r.birth(i)
                } else if i > 0 && j + 1 == i {
                    r.death(i)
                } else if i == j {
                    -(r.birth(i) + r.death(i))
                } else {
                    0.0
                }
            }
        }
    }

    /// `-q_ii(x)`.
    pub fn exit_rate(&self, i: usize, x: &[f64]) -> f64 {
        -self.rate(i, i, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpace {
    Finite(usize),
    BirthDeath(BirthDeathRates),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    dim: usize,
    env_space: EnvSpace,
    /// Per coefficient set: `d` drift expressions.
    drift: Vec<Vec<Expr>>,
    /// Per coefficient set: full `d×d` matrix mirrored from the upper triangle.
    diffusion: Vec<Vec<Expr>>,
    q: QMatrixSpec,
    sampling_box: Vec<[f64; 2]>,
    n_max: usize,
    /// `sup_x |q_jj(x) - q_jj(center)|` over the validation sample.
    q_perturbation: f64,
}

fn parse_all(texts: &[String], dim: usize) -> Result<Vec<Expr>, ModelError> {
    texts
        .iter()
        .map(|t| {
            parse_expression(t, dim).map_err(|source| ModelError::Parse {
                text: t.clone(),
                source,
            })
        })
        .collect()
}

impl Model {
    /// Parses and validates a model, checking every invariant on a
    /// quasi-random sample of the sampling box.
    pub fn load(config: &ModelConfig, n_max: usize) -> Result<Model, ModelError> {
        let d = config.dimension;
        if d == 0 {
            return Err(ModelError::Shape("dimension must be at least 1".into()));
        }
        if config.sampling_box.len() != d {
            return Err(ModelError::Shape(format!(
                "sampling_box has {} axes, expected {d}",
                config.sampling_box.len()
            )));
        }
        if let Some(bad) = config.sampling_box.iter().find(|[lo, hi]| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(ModelError::Shape(format!("sampling_box axis {bad:?} is empty or unbounded")));
        }
        let (env_space, q) = match (&config.environments, &config.qmatrix) {
            (EnvironmentsConfig::Count(n), Some(QMatrixConfig::Dense(rows))) => {
                if rows.len() != *n || rows.iter().any(|r| r.len() != *n) {
                    return Err(ModelError::Shape(format!("dense Q-matrix must be {n}x{n}")));
                }
                (EnvSpace::Finite(*n), QMatrixSpec::Dense(rows.clone()))
            }
            (EnvironmentsConfig::Count(n), Some(QMatrixConfig::StateDependent(rows))) => {
                if rows.len() != *n || rows.iter().any(|r| r.len() != *n) {
                    return Err(ModelError::Shape(format!("state-dependent Q-matrix must be {n}x{n}")));
                }
                let parsed = rows
                    .iter()
                    .map(|r| parse_all(r, d))
                    .collect::<Result<Vec<_>, _>>()?;
                (EnvSpace::Finite(*n), QMatrixSpec::StateDependent(parsed))
            }
            (EnvironmentsConfig::Count(n), None) if *n == 1 => {
                (EnvSpace::Finite(1), QMatrixSpec::Dense(vec![vec![0.0]]))
            }
            (EnvironmentsConfig::Count(_), None) => {
                return Err(ModelError::Shape("qmatrix is required when environments > 1".into()))
            }
            (EnvironmentsConfig::Count(_), Some(QMatrixConfig::BirthDeath(_))) => {
                return Err(ModelError::Shape(
                    "a birth-death Q-matrix needs environments = {\"birth_death\": ...}".into(),
                ))
            }
            (EnvironmentsConfig::BirthDeath { birth_death }, q) => {
                if let Some(other) = q {
                    if *other != QMatrixConfig::BirthDeath(*birth_death) {
                        return Err(ModelError::Shape(
                            "qmatrix conflicts with the birth-death environment space".into(),
                        ));
                    }
                }
                let r = *birth_death;
                if !(r.alpha >= 0.0 && r.lambda > 0.0 && r.mu > 0.0) {
                    return Err(ModelError::Shape("birth-death needs alpha >= 0, lambda > 0, mu > 0".into()));
                }
                (EnvSpace::BirthDeath(r), QMatrixSpec::BirthDeath(r))
            }
        };
        if let EnvSpace::Finite(0) = env_space {
            return Err(ModelError::Shape("at least one environment is required".into()));
        }
        let sets = match env_space {
            EnvSpace::Finite(n) => n,
            EnvSpace::BirthDeath(_) => 1,
        };
        let count_ok = |len: usize| len == 1 || len == sets;
        if !count_ok(config.drift.len()) || !count_ok(config.diffusion.len()) {
            return Err(ModelError::Shape(format!(
                "drift/diffusion must list 1 or {sets} coefficient sets (got {} and {})",
                config.drift.len(),
                config.diffusion.len()
            )));
        }
        let mut drift = Vec::new();
        for set in &config.drift {
            if set.len() != d {
                return Err(ModelError::Shape(format!("drift vectors need {d} entries")));
            }
            drift.push(parse_all(set, d)?.iter().map(Expr::simplify).collect());
        }
        let mut diffusion = Vec::new();
        for set in &config.diffusion {
            if set.len() != d || set.iter().any(|row| row.len() != d) {
                return Err(ModelError::Shape(format!("diffusion matrices must be {d}x{d}")));
            }
            let mut full = vec![Expr::Const(0.0); d * d];
            for r in 0..d {
                for c in r..d {
                    let e = parse_all(std::slice::from_ref(&set[r][c]), d)?.remove(0).simplify();
                    full[r * d + c] = e.clone();
                    full[c * d + r] = e;
                }
            }
            diffusion.push(full);
        }
        let mut model = Model {
            dim: d,
            env_space,
            drift,
            diffusion,
            q,
            sampling_box: config.sampling_box.clone(),
            n_max,
            q_perturbation: 0.0,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&mut self) -> Result<(), ModelError> {
        let points = halton_box(&self.sampling_box, VALIDATION_POINTS);
        let center: Vec<f64> = self.sampling_box.iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect();
        let envs = self.env_labels();
        let fail = |kind, x: &[f64], env, detail: String| ModelError::Validation {
            kind,
            witness: Witness {
                x: x.to_vec(),
                env,
                detail,
            },
        };
        if let QMatrixSpec::Dense(rows) = &self.q {
            for (r, row) in rows.iter().enumerate() {
                let scale = 1.0 + row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if let Some((c, v)) = row.iter().enumerate().find(|(c, v)| *c != r && **v < 0.0) {
                    return Err(fail(
                        ValidationKind::NegativeRate,
                        &center,
                        r + 1,
                        format!("q[{}][{}] = {v}", r + 1, c + 1),
                    ));
                }
                let sum: f64 = row.iter().sum();
                if sum.abs() > 1e-12 * scale || row.iter().any(|v| !v.is_finite()) {
                    return Err(fail(
                        ValidationKind::RowSumNonzero,
                        &center,
                        r + 1,
                        format!("row {} sums to {sum}", r + 1),
                    ));
                }
            }
        }
        let mut perturbation = 0.0f64;
        for &env in &envs {
            let q_bar = match &self.q {
                QMatrixSpec::StateDependent(_) => self.q.rate(env, env, &center),
                _ => 0.0,
            };
            for x in points.iter().chain(std::iter::once(&center)) {
                let mut b = vec![0.0; self.dim];
                self.drift_into(x, env, &mut b);
                if let Some(k) = b.iter().position(|v| !v.is_finite()) {
                    return Err(fail(
                        ValidationKind::BadExpression,
                        x,
                        env,
                        format!("drift component {} evaluates to {}", k + 1, b[k]),
                    ));
                }
                let a = self.diffusion_at(x, env);
                if let Some(v) = a.as_slice().iter().find(|v| !v.is_finite()) {
                    return Err(fail(
                        ValidationKind::BadExpression,
                        x,
                        env,
                        format!("diffusion evaluates to {v}"),
                    ));
                }
                if let Err(e) = matrix_root(&a) {
                    return Err(fail(ValidationKind::NotPsd, x, env, e.to_string()));
                }
                if let QMatrixSpec::StateDependent(rows) = &self.q {
                    let row: Vec<f64> = rows[env - 1].iter().map(|e| e.eval(x, env as f64)).collect();
                    if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                        return Err(fail(ValidationKind::BadExpression, x, env, format!("rate evaluates to {v}")));
                    }
                    let scale = 1.0 + row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    if let Some((c, v)) = row.iter().enumerate().find(|(c, v)| *c != env - 1 && **v < 0.0) {
                        return Err(fail(
                            ValidationKind::NegativeRate,
                            x,
                            env,
                            format!("q[{env}][{}] = {v}", c + 1),
                        ));
                    }
                    let sum: f64 = row.iter().sum();
                    if sum.abs() > 1e-10 * scale {
                        return Err(fail(
                            ValidationKind::RowSumNonzero,
                            x,
                            env,
                            format!("row {env} sums to {sum}"),
                        ));
                    }
                    perturbation = perturbation.max((row[env - 1] - q_bar).abs());
                }
            }
        }
        self.q_perturbation = perturbation;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn env_space(&self) -> &EnvSpace {
        &self.env_space
    }

    pub fn q(&self) -> &QMatrixSpec {
        &self.q
    }

    pub fn sampling_box(&self) -> &[[f64; 2]] {
        &self.sampling_box
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn q_perturbation(&self) -> f64 {
        self.q_perturbation
    }

    pub fn is_finite_env(&self) -> bool {
        matches!(self.env_space, EnvSpace::Finite(_))
    }

    /// Environment labels analysed: `1..=N`, or `0..=n_max` for birth-death.
    pub fn env_labels(&self) -> Vec<usize> {
        match self.env_space {
            EnvSpace::Finite(n) => (1..=n).collect(),
            EnvSpace::BirthDeath(_) => (0..=self.n_max).collect(),
        }
    }

    /// Whether any coefficient depends on the environment index symbol `i`.
    pub fn coefficients_use_env(&self) -> bool {
        self.drift.iter().flatten().chain(self.diffusion.iter().flatten()).any(Expr::uses_env)
    }

    fn set_index(&self, env: usize, len: usize) -> usize {
        if len == 1 {
            0
        } else {
            env - 1
        }
    }

    pub fn drift_expr(&self, env: usize, k: usize) -> &Expr {
        &self.drift[self.set_index(env, self.drift.len())][k]
    }

    pub fn diffusion_expr(&self, env: usize, r: usize, c: usize) -> &Expr {
        &self.diffusion[self.set_index(env, self.diffusion.len())][r * self.dim + c]
    }

    pub fn drift_into(&self, x: &[f64], env: usize, out: &mut [f64]) {
        let set = &self.drift[self.set_index(env, self.drift.len())];
        for (o, e) in out.iter_mut().zip(set) {
            *o = e.eval(x, env as f64);
        }
    }

    pub fn drift_at(&self, x: &[f64], env: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, env, &mut out);
        out
    }

    pub fn diffusion_into(&self, x: &[f64], env: usize, out: &mut SquareMatrix) {
        let set = &self.diffusion[self.set_index(env, self.diffusion.len())];
        let d = self.dim;
        for r in 0..d {
            for c in r..d {
                let v = set[r * d + c].eval(x, env as f64);
                out[(r, c)] = v;
                out[(c, r)] = v;
            }
        }
    }

    pub fn diffusion_at(&self, x: &[f64], env: usize) -> SquareMatrix {
        let mut a = SquareMatrix::zeros(self.dim);
        self.diffusion_into(x, env, &mut a);
        a
    }

    /// True when every drift component of `env` folds to the constant 0.
    /// No coefficient expression can be discontinuous (see [`Expr::is_continuous`]).
    pub fn coefficients_continuous(&self) -> bool {
        let d = self.dim();
        self.env_labels().iter().all(|&e| {
            (0..d).all(|k| self.drift_expr(e, k).is_continuous())
                && (0..d).all(|r| (0..d).all(|c| self.diffusion_expr(e, r, c).is_continuous()))
        })
    }

    pub fn drift_vanishes(&self, env: usize) -> bool {
        (0..self.dim).all(|k| self.drift_expr(env, k).is_zero())
    }
}

/// Convenience constructor for a one-dimensional model from expression strings.
pub fn one_dim_config(drift: &[&str], diffusion: &[&str], q: Option<Vec<Vec<f64>>>, half_width: f64) -> ModelConfig {
    let n = drift.len().max(diffusion.len());
    ModelConfig {
        dimension: 1,
        environments: EnvironmentsConfig::Count(n),
        drift: drift.iter().map(|s| vec![s.to_string()]).collect(),
        diffusion: diffusion.iter().map(|s| vec![vec![s.to_string()]]).collect(),
        qmatrix: q.map(QMatrixConfig::Dense),
        sampling_box: vec![[-half_width, half_width]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quartic() -> ModelConfig {
        one_dim_config(&["0", "0"], &["1 + x1^4", "1"], Some(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]), 10.0)
    }

    #[test]
    fn quartic_model_is_valid() {
        let m = Model::load(&quartic(), 200).unwrap();
        assert_eq!(m.env_labels(), vec![1, 2]);
        assert!(m.drift_vanishes(1));
        assert_eq!(m.diffusion_at(&[2.0], 1)[(0, 0)], 17.0);
        assert_eq!(m.diffusion_at(&[2.0], 2)[(0, 0)], 1.0);
        assert_eq!(m.q().exit_rate(1, &[0.0]), 1.0);
    }

    #[test]
    fn negative_diffusion_rejected() {
        let cfg = one_dim_config(&["0", "0"], &["-1", "1"], Some(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]), 1.0);
        let err = Model::load(&cfg, 200).unwrap_err();
        assert_eq!(err.kind(), Some(ValidationKind::NotPsd));
        match err {
            ModelError::Validation { witness, .. } => assert_eq!(witness.env, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn row_sum_checked() {
        let cfg = one_dim_config(&["0", "0"], &["1", "1"], Some(vec![vec![-1.0, 2.0], vec![1.0, -1.0]]), 1.0);
        assert_eq!(Model::load(&cfg, 200).unwrap_err().kind(), Some(ValidationKind::RowSumNonzero));
        let cfg = one_dim_config(&["0", "0"], &["1", "1"], Some(vec![vec![1.0, -1.0], vec![1.0, -1.0]]), 1.0);
        assert_eq!(Model::load(&cfg, 200).unwrap_err().kind(), Some(ValidationKind::NegativeRate));
    }

    #[test]
    fn bad_expression_rejected() {
        let cfg = one_dim_config(&["x2"], &["1"], None, 1.0);
        assert_eq!(Model::load(&cfg, 200).unwrap_err().kind(), Some(ValidationKind::BadExpression));
        let cfg = one_dim_config(&["1/x1"], &["1"], None, 1.0);
        // The Halton sample never hits 0 exactly but the box centre does.
        assert_eq!(Model::load(&cfg, 200).unwrap_err().kind(), Some(ValidationKind::BadExpression));
    }

    #[test]
    fn state_dependent_rates_validated() {
        let mut cfg = quartic();
        cfg.qmatrix = Some(QMatrixConfig::StateDependent(vec![
            vec!["-1 - x1^2".into(), "1 + x1^2".into()],
            vec!["2".into(), "-2".into()],
        ]));
        let m = Model::load(&cfg, 200).unwrap();
        assert!(!m.q().is_state_independent());
        assert!(m.q_perturbation() > 0.0);
        cfg.qmatrix = Some(QMatrixConfig::StateDependent(vec![
            vec!["-1".into(), "x1".into()],
            vec!["2".into(), "-2".into()],
        ]));
        assert!(Model::load(&cfg, 200).is_err());
    }

    #[test]
    fn birth_death_model() {
        let cfg = ModelConfig {
            dimension: 1,
            environments: EnvironmentsConfig::BirthDeath {
                birth_death: BirthDeathRates { alpha: 1.0, lambda: 1.0, mu: 2.0 },
            },
            drift: vec![vec!["-x1".into()]],
            diffusion: vec![vec![vec!["1 + i".into()]]],
            qmatrix: None,
            sampling_box: vec![[-1.0, 1.0]],
        };
        let m = Model::load(&cfg, 5).unwrap();
        assert_eq!(m.env_labels(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(m.diffusion_at(&[0.0], 3)[(0, 0)], 4.0);
        assert_eq!(m.q().rate(3, 4, &[0.0]), 3.0);
        assert_eq!(m.q().rate(3, 2, &[0.0]), 6.0);
        assert_eq!(m.q().rate(0, 0, &[0.0]), -1.0);
        assert!(m.coefficients_use_env());
    }

    #[test]
    fn config_json_round_trip() {
        let text = r#"{
            "dimension": 1,
            "environments": 2,
            "drift": [["0"], ["0"]],
            "diffusion": [[["1 + x1^4"]], [["1"]]],
            "qmatrix": {"dense": [[-1, 1], [1, -1]]},
            "sampling_box": [[-10, 10]]
        }"#;
        let cfg: ModelConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg, quartic());
    }
}
