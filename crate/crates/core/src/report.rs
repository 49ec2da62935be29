//! Run configuration, analysis pipelines and JSON report emission shared by
//! the command-line tool and the C interface.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::classify1d::{classify_fd_1d, ClassifyError, ClassifyOptions};
use crate::ctmc::{birthdeath_rs_test, powerlaw_verdict};
use crate::expr::parse_expression;
use crate::lyapunov::{
    check_forward_certificate, check_reject_certificate, fit_c, Certificate, CertificateKind, CompactSet,
    RadialProfile, TestFunction,
};
use crate::mc_verify::{fd_empirical_verdict, EmpiricalOutcome, VerifyError};
use crate::model::{Model, ModelConfig, ModelError};
use crate::quadrature::{default_ladder, QuadError};
use crate::radial::{
    classify_radial, default_r_grid, growth_check, radial_envelopes, radial_ladder, solve_ode2, Direction,
    RadialError, RadialOptions,
};
use crate::rng::StreamId;
use crate::sde_sim::{simulate_path, terminal_state, write_csv, SimError};
use crate::verdict::{FdOutcome, Prerequisites, Verdict};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const MODEL_KEYS: [&str; 6] = ["dimension", "environments", "drift", "diffusion", "qmatrix", "sampling_box"];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io(_) => 1,
            RunError::Numeric(_) => 2,
        }
    }
}

impl From<ModelError> for RunError {
    fn from(e: ModelError) -> Self {
        RunError::Config(e.to_string())
    }
}

impl From<QuadError> for RunError {
    fn from(e: QuadError) -> Self {
        RunError::Numeric(e.to_string())
    }
}

impl From<ClassifyError> for RunError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::Quadrature(q) => q.into(),
            other => RunError::Config(other.to_string()),
        }
    }
}

impl From<RadialError> for RunError {
    fn from(e: RadialError) -> Self {
        match e {
            RadialError::DegenerateDiffusion { .. } | RadialError::BadGrid => RunError::Config(e.to_string()),
            other => RunError::Numeric(other.to_string()),
        }
    }
}

impl From<SimError> for RunError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::BadStep(_) | SimError::StepTooLarge { .. } | SimError::StateDependent | SimError::Chain(_) => {
                RunError::Config(e.to_string())
            }
            SimError::NotPsd { .. } => RunError::Numeric(e.to_string()),
        }
    }
}

impl From<VerifyError> for RunError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Sim(s) => s.into(),
            other => RunError::Config(other.to_string()),
        }
    }
}

fn default_tol() -> f64 {
    1e-8
}
fn default_n_paths() -> u64 {
    10_000
}
fn default_dt() -> f64 {
    1e-3
}
fn default_seed() -> u64 {
    42
}
fn default_n_max() -> usize {
    200
}
fn default_grid_density() -> usize {
    201
}
fn default_one() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_verify_ladder() -> Vec<f64> {
    vec![2.0, 5.0, 10.0, 20.0]
}
fn default_r_max() -> f64 {
    1e16
}
fn default_n_terms() -> usize {
    100_000
}
fn default_recorded() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadialSection {
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    #[serde(default)]
    pub sphere_samples: Option<usize>,
    #[serde(default = "radial_ladder")]
    pub ladder: Vec<f64>,
}

impl Default for RadialSection {
    fn default() -> Self {
        RadialSection {
            r_max: default_r_max(),
            sphere_samples: None,
            ladder: radial_ladder(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSection {
    pub kind: CertificateKind,
    /// One expression per environment, or one shared. Reject certificates
    /// without `v` use the radial ODE solution on the lower envelopes.
    #[serde(default)]
    pub v: Option<Vec<String>>,
    pub k: CompactSet,
    #[serde(default)]
    pub c: Option<CompactSet>,
    /// `c` (forward) or `α` (reject). A forward certificate without it uses
    /// the fitted `c` plus `1e-3`; a reject certificate defaults to `0.9`.
    #[serde(default)]
    pub c_or_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub x0: Vec<f64>,
    #[serde(default)]
    pub env: Option<usize>,
    #[serde(default = "default_one")]
    pub t_end: f64,
    /// Paths written to `--paths-out`.
    #[serde(default = "default_recorded")]
    pub recorded_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default)]
    pub env: Option<usize>,
    #[serde(default = "default_one")]
    pub t: f64,
    #[serde(default)]
    pub k: Option<CompactSet>,
    #[serde(default = "default_verify_ladder")]
    pub ladder: Vec<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            env: None,
            t: 1.0,
            k: None,
            ladder: default_verify_ladder(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BirthDeathSection {
    pub alpha: f64,
    pub lambda: f64,
    pub mu: f64,
    #[serde(default = "default_n_terms")]
    pub n_terms: usize,
}

/// Numeric knobs and per-analysis sections; everything except the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Knobs {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_ladder")]
    pub ladder: Vec<f64>,
    #[serde(default = "default_n_paths")]
    pub n_paths: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_grid_density")]
    pub grid_density: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radial: Option<RadialSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub birthdeath: Option<BirthDeathSection>,
}

impl Default for Knobs {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all knobs have defaults")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    pub knobs: Knobs,
}

impl RunConfig {
    /// Parses a configuration document; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let value: Value = serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        let Value::Object(mut all) = value else {
            return Err(RunError::Config("configuration must be a JSON object".into()));
        };
        let mut model = Map::new();
        for key in MODEL_KEYS {
            if let Some(v) = all.remove(key) {
                model.insert(key.to_string(), v);
            }
        }
        let knobs: Knobs = serde_json::from_value(Value::Object(all)).map_err(|e| RunError::Config(e.to_string()))?;
        let model = if model.is_empty() {
            None
        } else {
            Some(serde_json::from_value(Value::Object(model)).map_err(|e| RunError::Config(e.to_string()))?)
        };
        Ok(RunConfig { model, knobs })
    }

    /// The effective configuration as one JSON object.
    pub fn echo(&self) -> Value {
        let mut out = match serde_json::to_value(&self.knobs) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        if let Some(m) = &self.model {
            if let Ok(Value::Object(mm)) = serde_json::to_value(m) {
                out.extend(mm);
            }
        }
        Value::Object(out)
    }

    pub fn load_model(&self) -> Result<Model, RunError> {
        let cfg = self
            .model
            .as_ref()
            .ok_or_else(|| RunError::Config("this command needs a model (dimension, drift, diffusion, ...)".into()))?;
        Ok(Model::load(cfg, self.knobs.n_max)?)
    }
}

/// Command-line style overrides applied on top of a parsed configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub ladder: Option<Vec<f64>>,
    pub n_paths: Option<u64>,
    pub dt: Option<f64>,
    pub n_max: Option<usize>,
    pub grid_density: Option<usize>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub n_terms: Option<usize>,
    pub x0: Option<Vec<f64>>,
    pub env: Option<usize>,
    pub t_end: Option<f64>,
    pub epsilon: Option<f64>,
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) -> Result<(), RunError> {
        let k = &mut self.knobs;
        if let Some(v) = o.seed {
            k.master_seed = v;
        }
        if let Some(v) = o.tol {
            k.tol = v;
        }
        if let Some(v) = &o.ladder {
            k.ladder = v.clone();
        }
        if let Some(v) = o.n_paths {
            k.n_paths = v;
        }
        if let Some(v) = o.dt {
            k.dt = v;
        }
        if let Some(v) = o.n_max {
            k.n_max = v;
        }
        if let Some(v) = o.grid_density {
            k.grid_density = v;
        }
        if o.alpha.is_some() || o.lambda.is_some() || o.mu.is_some() || o.n_terms.is_some() {
            let cur = k.birthdeath.as_ref();
            let pick = |new: Option<f64>, old: Option<f64>, name: &str| {
                new.or(old).ok_or_else(|| RunError::Config(format!("birthdeath needs --{name}")))
            };
            k.birthdeath = Some(BirthDeathSection {
                alpha: pick(o.alpha, cur.map(|b| b.alpha), "alpha")?,
                lambda: pick(o.lambda, cur.map(|b| b.lambda), "lambda")?,
                mu: pick(o.mu, cur.map(|b| b.mu), "mu")?,
                n_terms: o.n_terms.or(cur.map(|b| b.n_terms)).unwrap_or_else(default_n_terms),
            });
        }
        if o.x0.is_some() || o.t_end.is_some() || (o.env.is_some() && k.simulate.is_some()) {
            let cur = k.simulate.clone();
            let x0 = o
                .x0
                .clone()
                .or(cur.as_ref().map(|s| s.x0.clone()))
                .ok_or_else(|| RunError::Config("simulate needs --x0".into()))?;
            k.simulate = Some(SimulateSection {
                x0,
                env: o.env.or(cur.as_ref().and_then(|s| s.env)),
                t_end: o.t_end.or(cur.as_ref().map(|s| s.t_end)).unwrap_or(1.0),
                recorded_paths: cur.map_or_else(default_recorded, |s| s.recorded_paths),
            });
        }
        if o.epsilon.is_some() || o.env.is_some() {
            let mut v = k.verify.clone().unwrap_or_default();
            if let Some(e) = o.epsilon {
                v.epsilon = e;
            }
            if o.env.is_some() {
                v.env = o.env;
            }
            k.verify = Some(v);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Classify1d,
    Radial,
    LyapunovCheck,
    Birthdeath,
    Simulate,
    VerifyFd,
    ExistenceCheck,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Classify1d,
        Command::Radial,
        Command::LyapunovCheck,
        Command::Birthdeath,
        Command::Simulate,
        Command::VerifyFd,
        Command::ExistenceCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Classify1d => "classify1d",
            Command::Radial => "radial",
            Command::LyapunovCheck => "lyapunov-check",
            Command::Birthdeath => "birthdeath",
            Command::Simulate => "simulate",
            Command::VerifyFd => "verify-fd",
            Command::ExistenceCheck => "existence-check",
        }
    }

    pub fn from_name(name: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assumptions {
    pub cb_feller_assumed: bool,
    pub chain_fd_assumed: bool,
    pub holder_assumed: bool,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub feller_nonexplosion: BTreeMap<usize, bool>,
}

impl From<&Prerequisites> for Assumptions {
    fn from(p: &Prerequisites) -> Self {
        Assumptions {
            cb_feller_assumed: p.cb_feller_assumed,
            chain_fd_assumed: p.chain_fd_assumed,
            holder_assumed: p.holder_assumed,
            feller_nonexplosion: p.feller_nonexplosion.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub command: &'static str,
    pub tool_version: &'static str,
    /// `None` for commands that do not decide the property.
    pub verdict: Option<FdOutcome>,
    pub evidence: Vec<crate::verdict::Evidence>,
    pub notes: Vec<String>,
    pub assumptions: Option<Assumptions>,
    pub analysis: Value,
    pub config: Value,
}

impl Report {
    fn new(command: Command, config: &RunConfig) -> Self {
        Report {
            command: command.name(),
            tool_version: TOOL_VERSION,
            verdict: None,
            evidence: Vec::new(),
            notes: Vec::new(),
            assumptions: None,
            analysis: Value::Null,
            config: config.echo(),
        }
    }

    fn with_verdict(mut self, v: Verdict) -> Self {
        self.verdict = Some(v.outcome);
        self.assumptions = Some(Assumptions::from(&v.prerequisites));
        self.evidence = v.evidence;
        self.notes = v.notes;
        self
    }

    /// 0 for a definite verdict or a command without one, 3 for inconclusive.
    pub fn exit_code(&self) -> i32 {
        match self.verdict {
            Some(FdOutcome::Inconclusive) => 3,
            _ => 0,
        }
    }
}

/// Converts a serialisable value to JSON, keeping non-finite floats as the
/// strings `"inf"`, `"-inf"` and `"nan"` instead of `null`.
pub fn to_json_value<T: Serialize>(value: &T) -> Value {
    use serde_value::Value as V;
    fn conv(v: V) -> Value {
        let float = |f: f64| {
            if f.is_finite() {
                serde_json::Number::from_f64(f).map_or(Value::Null, Value::Number)
            } else if f.is_nan() {
                Value::String("nan".into())
            } else if f > 0.0 {
                Value::String("inf".into())
            } else {
                Value::String("-inf".into())
            }
        };
        match v {
            V::Bool(b) => Value::Bool(b),
            V::U8(n) => n.into(),
            V::U16(n) => n.into(),
            V::U32(n) => n.into(),
            V::U64(n) => n.into(),
            V::I8(n) => n.into(),
            V::I16(n) => n.into(),
            V::I32(n) => n.into(),
            V::I64(n) => n.into(),
            V::F32(f) => float(f as f64),
            V::F64(f) => float(f),
            V::Char(c) => Value::String(c.to_string()),
            V::String(s) => Value::String(s),
            V::Unit | V::Option(None) => Value::Null,
            V::Option(Some(b)) | V::Newtype(b) => conv(*b),
            V::Seq(items) => Value::Array(items.into_iter().map(conv).collect()),
            V::Map(m) => Value::Object(
                m.into_iter()
                    .map(|(k, v)| {
                        let key = match conv(k) {
                            Value::String(s) => s,
                            other => other.to_string(),
                        };
                        (key, conv(v))
                    })
                    .collect(),
            ),
            V::Bytes(b) => Value::Array(b.into_iter().map(Value::from).collect()),
        }
    }
    match serde_value::to_value(value) {
        Ok(v) => conv(v),
        Err(e) => Value::String(format!("unserialisable: {e}")),
    }
}

/// Serialises the report: sorted keys, shortest round-trip floats, one
/// trailing newline.
pub fn report_to_string(report: &Report) -> String {
    let mut text = serde_json::to_string_pretty(&to_json_value(report)).expect("JSON values always serialise");
    text.push('\n');
    text
}

pub fn emit_report<W: Write>(report: &Report, mut sink: W) -> io::Result<usize> {
    let text = report_to_string(report);
    sink.write_all(text.as_bytes())?;
    Ok(text.len())
}

/// Result of one run: the report plus any CSV path dump.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub paths_csv: Option<Vec<u8>>,
}

/// Runs `command`; `want_paths` requests the CSV dump from `simulate`.
pub fn run(command: Command, config: &RunConfig, want_paths: bool) -> Result<RunOutput, RunError> {
    let mut paths_csv = None;
    let report = match command {
        Command::Classify1d => run_classify1d(config)?,
        Command::Radial => run_radial(config)?,
        Command::LyapunovCheck => run_lyapunov(config)?,
        Command::Birthdeath => run_birthdeath(config)?,
        Command::Simulate => {
            let (r, csv) = run_simulate(config, want_paths)?;
            paths_csv = csv;
            r
        }
        Command::VerifyFd => run_verify(config)?,
        Command::ExistenceCheck => run_existence(config)?,
    };
    Ok(RunOutput { report, paths_csv })
}

fn classify_options(k: &Knobs) -> ClassifyOptions {
    ClassifyOptions {
        ladder: k.ladder.clone(),
        tol: k.tol,
        ..ClassifyOptions::default()
    }
}

fn run_classify1d(config: &RunConfig) -> Result<Report, RunError> {
    let model = config.load_model()?;
    let verdict = classify_fd_1d(&model, &classify_options(&config.knobs))?;
    Ok(Report::new(Command::Classify1d, config).with_verdict(verdict))
}

fn radial_options(k: &Knobs) -> RadialOptions {
    let section = k.radial.clone().unwrap_or_default();
    RadialOptions {
        r_max: section.r_max,
        sphere_samples: section.sphere_samples,
        ladder: section.ladder,
        ..RadialOptions::default()
    }
}

fn run_radial(config: &RunConfig) -> Result<Report, RunError> {
    let model = config.load_model()?;
    let rep = classify_radial(&model, &radial_options(&config.knobs))?;
    let analysis = serde_json::json!({
        "upper": to_json_value(&rep.upper),
        "lower": to_json_value(&rep.lower),
        "growth": to_json_value(&rep.growth),
        "small_ball_sup": to_json_value(&rep.small_ball_sup),
        "ode": to_json_value(&rep.ode),
    });
    let mut report = Report::new(Command::Radial, config).with_verdict(rep.verdict);
    report.analysis = analysis;
    Ok(report)
}

fn run_lyapunov(config: &RunConfig) -> Result<Report, RunError> {
    let model = config.load_model()?;
    let section = config
        .knobs
        .certificate
        .as_ref()
        .ok_or_else(|| RunError::Config("lyapunov-check needs a \"certificate\" section".into()))?;
    let density = config.knobs.grid_density;
    let mut notes = Vec::new();
    let v = match &section.v {
        Some(src) => TestFunction::Exprs(
            src.iter()
                .map(|s| parse_expression(s, model.dim()))
                .collect::<Result<_, _>>()
                .map_err(|e| RunError::Config(e.to_string()))?,
        ),
        None if section.kind == CertificateKind::Reject => {
            let env = radial_envelopes(&model, Direction::Lower, &default_r_grid(1e7, 16), 64 * model.dim())?;
            let sol = solve_ode2(&env, 1e6)?;
            notes.push(format!(
                "U built from the radial ODE on lower envelopes, residual {:e}",
                sol.residual_max
            ));
            TestFunction::Radial(RadialProfile::from_ode(&sol, &env))
        }
        None => return Err(RunError::Config("forward certificates need \"v\"".into())),
    };
    let mut analysis = Map::new();
    let c_or_alpha = match (section.kind, section.c_or_alpha) {
        (_, Some(c)) => c,
        (CertificateKind::Forward, None) => {
            let fit = fit_c(&model, &v, density).map_err(|e| RunError::Config(e.to_string()))?;
            notes.push(format!("c taken as fitted sup LV/V + 1e-3 = {}", fit.c + 1e-3));
            fit.c + 1e-3
        }
        (CertificateKind::Reject, None) => 0.9,
    };
    if section.kind == CertificateKind::Forward {
        if let Ok(fit) = fit_c(&model, &v, density) {
            analysis.insert("fit_c".into(), to_json_value(&fit));
        }
    }
    let cert = Certificate {
        v,
        kind: section.kind,
        k: section.k.clone(),
        c_set: section.c.clone(),
        c_or_alpha,
    };
    let rep = match section.kind {
        CertificateKind::Forward => check_forward_certificate(&model, &cert, density),
        CertificateKind::Reject => check_reject_certificate(&model, &cert, density),
    };
    let outcome = match (rep.passed, section.kind) {
        (true, CertificateKind::Forward) => FdOutcome::FellerDynkin,
        (true, CertificateKind::Reject) => FdOutcome::NotFellerDynkin,
        (false, _) => FdOutcome::Inconclusive,
    };
    if rep.passed {
        notes.push("numerically supported on the evaluation grid, not proved".into());
    }
    notes.extend(rep.notes.iter().cloned());
    analysis.insert("certificate".into(), to_json_value(&rep));
    analysis.insert("c_or_alpha".into(), to_json_value(&c_or_alpha));
    let mut report = Report::new(Command::LyapunovCheck, config).with_verdict(Verdict {
        outcome,
        evidence: Vec::new(),
        prerequisites: Prerequisites {
            cb_feller_assumed: model.coefficients_continuous(),
            chain_fd_assumed: true,
            ..Prerequisites::default()
        },
        notes,
    });
    report.analysis = Value::Object(analysis);
    Ok(report)
}

fn run_birthdeath(config: &RunConfig) -> Result<Report, RunError> {
    let s = config
        .knobs
        .birthdeath
        .as_ref()
        .ok_or_else(|| RunError::Config("birthdeath needs alpha, lambda and mu".into()))?;
    if !(s.lambda > 0.0 && s.mu > 0.0 && s.alpha.is_finite()) {
        return Err(RunError::Config("birth-death rates need lambda > 0, mu > 0 and finite alpha".into()));
    }
    let series = birthdeath_rs_test(s.alpha, s.lambda, s.mu, s.n_terms);
    let closed = powerlaw_verdict(s.alpha, s.lambda, s.mu);
    let outcome = match series.both_diverge() {
        Some(true) => FdOutcome::FellerDynkin,
        Some(false) => FdOutcome::NotFellerDynkin,
        None => FdOutcome::Inconclusive,
    };
    let mut notes = vec!["verdict refers to the birth-death chain alone".to_string()];
    if outcome.is_definite() && (outcome == FdOutcome::FellerDynkin) != closed {
        notes.push("series evidence disagrees with the closed-form power-law criterion".into());
    }
    let mut report = Report::new(Command::Birthdeath, config);
    report.verdict = Some(outcome);
    report.notes = notes;
    report.analysis = serde_json::json!({
        "series": to_json_value(&series),
        "powerlaw_verdict": closed,
    });
    Ok(report)
}

fn first_env(model: &Model, requested: Option<usize>) -> Result<usize, RunError> {
    let labels = model.env_labels();
    match requested {
        Some(e) if labels.contains(&e) => Ok(e),
        Some(e) => Err(RunError::Config(format!("environment {e} does not exist"))),
        None => Ok(labels[0]),
    }
}

fn run_simulate(config: &RunConfig, want_paths: bool) -> Result<(Report, Option<Vec<u8>>), RunError> {
    let model = config.load_model()?;
    let k = &config.knobs;
    let s = k
        .simulate
        .as_ref()
        .ok_or_else(|| RunError::Config("simulate needs a \"simulate\" section with x0".into()))?;
    if s.x0.len() != model.dim() {
        return Err(RunError::Config(format!("x0 has {} coordinates, model has {}", s.x0.len(), model.dim())));
    }
    let env = first_env(&model, s.env)?;
    use rayon::prelude::*;
    let terminals = (0..k.n_paths)
        .into_par_iter()
        .map(|p| terminal_state(&model, &s.x0, env, s.t_end, k.dt, StreamId::new(k.master_seed, p)))
        .collect::<Result<Vec<_>, _>>()?;
    let d = model.dim();
    let finite: Vec<&crate::sde_sim::Terminal> = terminals.iter().filter(|t| !t.exploded).collect();
    let n = finite.len() as f64;
    let mean: Vec<f64> = (0..d).map(|c| finite.iter().map(|t| t.y[c]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..d)
        .map(|c| finite.iter().map(|t| (t.y[c] - mean[c]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    let mut envs: BTreeMap<usize, u64> = BTreeMap::new();
    for t in &terminals {
        *envs.entry(t.env).or_default() += 1;
    }
    let csv = if want_paths {
        let paths = (0..s.recorded_paths.min(k.n_paths as usize) as u64)
            .into_par_iter()
            .map(|p| simulate_path(&model, &s.x0, env, s.t_end, k.dt, StreamId::new(k.master_seed, p)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut buf = Vec::new();
        write_csv(&paths, &mut buf)?;
        Some(buf)
    } else {
        None
    };
    let scheme = if model.q().is_state_independent() {
        "segment_exact"
    } else {
        "joint_small_step"
    };
    let mut report = Report::new(Command::Simulate, config);
    report.analysis = serde_json::json!({
        "n_paths": k.n_paths,
        "exploded": terminals.len() - finite.len(),
        "mean": to_json_value(&mean),
        "variance": to_json_value(&var),
        "final_env_counts": to_json_value(&envs),
        "scheme": scheme,
        "start_env": env,
    });
    if scheme == "joint_small_step" {
        report.notes.push("state-dependent switching simulated by per-step thinning; bias O(dt)".into());
    }
    Ok((report, csv))
}

fn analytic_verdict(model: &Model, config: &RunConfig) -> Result<Verdict, RunError> {
    if model.dim() == 1 && model.q().is_state_independent() {
        match classify_fd_1d(model, &classify_options(&config.knobs)) {
            Ok(v) => return Ok(v),
            Err(ClassifyError::AbsorbingState(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(classify_radial(model, &radial_options(&config.knobs))?.verdict)
}

fn run_verify(config: &RunConfig) -> Result<Report, RunError> {
    let model = config.load_model()?;
    let k = &config.knobs;
    let s = k.verify.clone().unwrap_or_default();
    let env = first_env(&model, s.env)?;
    let target = s.k.clone().unwrap_or_else(|| CompactSet {
        bounds: model.sampling_box().to_vec(),
        envs: model.env_labels(),
    });
    let empirical = fd_empirical_verdict(&model, env, s.t, &target, &s.ladder, s.epsilon, k.n_paths, k.dt, k.master_seed)?;
    let (verdict, analytic_error) = match analytic_verdict(&model, config) {
        Ok(v) => (v, None),
        Err(e) => (
            Verdict {
                outcome: FdOutcome::Inconclusive,
                evidence: Vec::new(),
                prerequisites: Prerequisites::default(),
                notes: Vec::new(),
            },
            Some(e.to_string()),
        ),
    };
    let disagreement = matches!(
        (verdict.outcome, empirical.outcome),
        (FdOutcome::FellerDynkin, EmpiricalOutcome::InconsistentWithFd)
            | (FdOutcome::NotFellerDynkin, EmpiricalOutcome::ConsistentWithFd)
    );
    let mut report = Report::new(Command::VerifyFd, config).with_verdict(verdict);
    if let Some(e) = &analytic_error {
        report.notes.push(format!("analytic classification failed: {e}"));
    }
    report.notes.push("empirical evidence never overrides the analytic verdict".into());
    report.analysis = serde_json::json!({
        "empirical": to_json_value(&empirical),
        "disagreement": disagreement,
    });
    Ok(report)
}

fn run_existence(config: &RunConfig) -> Result<Report, RunError> {
    let model = config.load_model()?;
    let growth = growth_check(&model);
    let mut report = Report::new(Command::ExistenceCheck, config);
    report.analysis = to_json_value(&growth);
    if !growth.existence {
        report.notes.push("linear growth bound not observed; existence is not established by this check".into());
    }
    Ok(report)
}
