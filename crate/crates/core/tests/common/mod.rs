//! Generators and property suites shared by the acceptance and property tests.
#![allow(dead_code, clippy::type_complexity, clippy::result_large_err)]

use fellerdyn::classify1d::{classify_fd_1d, ClassifyOptions};
use fellerdyn::expr::{parse_expression, Expr, Func};
use fellerdyn::lyapunov::{apply_generator, check_forward_certificate, Certificate, CertificateKind, CompactSet, TestFunction};
use fellerdyn::model::{one_dim_config, Model, ModelConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestError, TestRng, TestRunner};

pub const SUITE_CASES: u32 = 256;

pub fn runner() -> TestRunner {
    let config = Config {
        cases: SUITE_CASES,
        failure_persistence: None,
        max_global_rejects: 8 * SUITE_CASES,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn b(e: Expr) -> Box<Expr> {
    Box::new(e)
}

/// Non-negative constants; negation is its own node.
fn constant() -> impl Strategy<Value = f64> {
    prop_oneof![
        (0u32..20).prop_map(f64::from),
        (1u32..10_000).prop_map(|n| f64::from(n) / 1000.0),
        (1.0f64..1e6),
    ]
}

fn exponent() -> impl Strategy<Value = f64> {
    prop_oneof![(-4i32..=5).prop_map(f64::from), (-30i32..30).prop_map(|n| f64::from(n) / 4.0)]
}

/// Any expression tree over `x1..x{dim}` and `i`.
pub fn any_expr(dim: usize) -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        constant().prop_map(Expr::Const),
        (0..dim).prop_map(Expr::Var),
        Just(Expr::Env),
    ];
    leaf.prop_recursive(4, 32, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|u| Expr::Neg(b(u))),
            (inner.clone(), inner.clone()).prop_map(|(u, v)| Expr::Add(b(u), b(v))),
            (inner.clone(), inner.clone()).prop_map(|(u, v)| Expr::Sub(b(u), b(v))),
            (inner.clone(), inner.clone()).prop_map(|(u, v)| Expr::Mul(b(u), b(v))),
            (inner.clone(), inner.clone()).prop_map(|(u, v)| Expr::Div(b(u), b(v))),
            (inner.clone(), exponent()).prop_map(|(u, p)| Expr::Pow(b(u), p)),
            (prop::sample::select(Func::ALL.to_vec()), inner.clone(), inner).prop_map(|(f, u, v)| {
                let args = if f.arity() == 2 { vec![u, v] } else { vec![u] };
                Expr::Call(f, args)
            }),
        ]
    })
}

fn one_plus_square(u: Expr) -> Expr {
    Expr::Add(b(Expr::Const(1.0)), b(Expr::Pow(b(u), 2.0)))
}

/// Smooth expressions: every quotient, logarithm, root and real power acts
/// on something bounded away from zero.
pub fn smooth_expr(dim: usize) -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (0u32..40).prop_map(|n| Expr::Const(f64::from(n) / 8.0)),
        (0..dim).prop_map(Expr::Var),
        Just(Expr::Env),
    ];
    leaf.prop_recursive(3, 24, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|u| Expr::Neg(b(u))),
            (inner.clone(), inner.clone()).prop_map(|(u, v)| Expr::Add(b(u), b(v))),
            (inner.clone(), inner.clone()).prop_map(|(u, v)| Expr::Sub(b(u), b(v))),
            (inner.clone(), inner.clone()).prop_map(|(u, v)| Expr::Mul(b(u), b(v))),
            (inner.clone(), inner.clone()).prop_map(|(u, v)| Expr::Div(b(u), b(one_plus_square(v)))),
            (inner.clone(), 2i32..4).prop_map(|(u, p)| Expr::Pow(b(u), f64::from(p))),
            (inner.clone(), exponent()).prop_map(|(u, p)| Expr::Pow(b(one_plus_square(u)), p)),
            inner.clone().prop_map(|u| Expr::Call(Func::Log, vec![one_plus_square(u)])),
            inner.clone().prop_map(|u| Expr::Call(Func::Sqrt, vec![one_plus_square(u)])),
            (prop::sample::select(vec![Func::Sin, Func::Cos, Func::Tanh]), inner.clone())
                .prop_map(|(f, u)| Expr::Call(f, vec![u])),
            inner.prop_map(|u| Expr::Call(Func::Exp, vec![Expr::Call(Func::Tanh, vec![u])])),
        ]
    })
}

pub fn suite_parser_round_trip() -> Result<(), TestError<(usize, Expr)>> {
    let strategy = (1usize..4).prop_flat_map(|d| (Just(d), any_expr(d)));
    runner().run(&strategy, |(d, e)| {
        let text = e.to_string();
        let back = parse_expression(&text, d).map_err(|err| TestCaseError::fail(format!("`{text}`: {err}")))?;
        prop_assert_eq!(&back, &e, "printed as `{}`", text);
        Ok(())
    })
}

pub fn suite_derivatives() -> Result<(), TestError<(Expr, Vec<f64>, usize, f64)>> {
    let strategy = (smooth_expr(2), prop::collection::vec(-2.0f64..2.0, 2), 0usize..2, 1.0f64..3.0);
    runner().run(&strategy, |(e, x, var, env)| {
        let value = e.eval(&x, env);
        prop_assume!(value.is_finite() && value.abs() < 1e8);
        let symbolic = e.differentiate(var).eval(&x, env);
        let h = 1e-5;
        let shifted = |s: f64| {
            let mut y = x.clone();
            y[var] += s;
            e.eval(&y, env)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let scale = symbolic.abs().max(1.0);
        prop_assert!((symbolic - fd).abs() <= 1e-6 * scale, "{e} at {x:?}: d/dx{} = {symbolic}, fd {fd}", var + 1);
        Ok(())
    })
}

fn two_env(drift: &str, diffusion: &str) -> ModelConfig {
    one_dim_config(&[drift, "0"], &[diffusion, "1"], Some(vec![vec![-1.0, 1.0], vec![2.0, -2.0]]), 5.0)
}

fn generator_models() -> Vec<Model> {
    let two_d = ModelConfig {
        dimension: 2,
        environments: fellerdyn::model::EnvironmentsConfig::Count(2),
        drift: vec![vec!["-x1".into(), "x1 - x2".into()], vec!["0".into(), "-x2^3".into()]],
        diffusion: vec![
            vec![vec!["1 + x2^2".into(), "0.5".into()], vec!["0.5".into(), "2".into()]],
            vec![vec!["1".into(), "0".into()], vec!["0".into(), "1 + x1^2".into()]],
        ],
        qmatrix: Some(fellerdyn::model::QMatrixConfig::StateDependent(vec![
            vec!["-1 - x1^2".into(), "1 + x1^2".into()],
            vec!["3".into(), "-3".into()],
        ])),
        sampling_box: vec![[-1.0, 1.0], [-1.0, 1.0]],
    };
    vec![
        Model::load(&two_env("-x1", "1 + x1^4"), 200).unwrap(),
        Model::load(&two_env("sin(x1)", "2 + cos(x1)"), 200).unwrap(),
        Model::load(&two_d, 200).unwrap(),
    ]
}

pub fn suite_generator_linearity() -> Result<(), TestError<(usize, Expr, Expr, f64, f64, Vec<f64>, usize)>> {
    let models = generator_models();
    let strategy = (
        0..models.len(),
        smooth_expr(2),
        smooth_expr(2),
        -5.0f64..5.0,
        -5.0f64..5.0,
        prop::collection::vec(-3.0f64..3.0, 2),
        1usize..3,
    );
    runner().run(&strategy, |(m, f, g, alpha, beta, x, env)| {
        let model = &models[m];
        let d = model.dim();
        // One-dimensional models must not see x2.
        let restrict = |e: &Expr| if d == 1 { substitute_x2(e) } else { e.clone() };
        let (f, g) = (restrict(&f), restrict(&g));
        let x = &x[..d];
        let combo = Expr::Add(
            b(Expr::Mul(b(Expr::Const(alpha)), b(f.clone()))),
            b(Expr::Mul(b(Expr::Const(beta)), b(g.clone()))),
        );
        let l = |e: &Expr| apply_generator(model, &TestFunction::Exprs(vec![e.clone()]), x, env).unwrap();
        let (lf, lg, lh) = (l(&f), l(&g), l(&combo));
        prop_assume!(lf.is_finite() && lg.is_finite());
        let expected = alpha * lf + beta * lg;
        // The chain part subtracts function values, so rounding scales with them too.
        let size = |y: usize| (alpha * f.eval(x, y as f64)).abs() + (beta * g.eval(x, y as f64)).abs();
        let chain: f64 = model.q().off_diagonal(env, x).into_iter().map(|(j, q)| q * (size(j) + size(env))).sum();
        let scale = (alpha * lf).abs() + (beta * lg).abs() + chain;
        prop_assert!((lh - expected).abs() <= 1e-10 * scale.max(1.0), "L(af+bg) = {lh}, aLf+bLg = {expected}");
        Ok(())
    })
}

fn substitute_x2(e: &Expr) -> Expr {
    match e {
        Expr::Var(1) => Expr::Var(0),
        Expr::Neg(u) => Expr::Neg(b(substitute_x2(u))),
        Expr::Add(u, v) => Expr::Add(b(substitute_x2(u)), b(substitute_x2(v))),
        Expr::Sub(u, v) => Expr::Sub(b(substitute_x2(u)), b(substitute_x2(v))),
        Expr::Mul(u, v) => Expr::Mul(b(substitute_x2(u)), b(substitute_x2(v))),
        Expr::Div(u, v) => Expr::Div(b(substitute_x2(u)), b(substitute_x2(v))),
        Expr::Pow(u, p) => Expr::Pow(b(substitute_x2(u)), *p),
        Expr::Call(f, args) => Expr::Call(*f, args.iter().map(substitute_x2).collect()),
        other => other.clone(),
    }
}

/// One-dimensional coefficient pairs with clear-cut integral tests.
pub const SCALING_CORPUS: [(&str, &str); 10] = [
    ("0", "1"),
    ("-x1", "1"),
    ("0", "1 + x1^4"),
    ("0", "1 + x1^2"),
    ("-x1^3", "1"),
    ("-x1", "1 + x1^2"),
    ("x1", "1"),
    ("-x1^3", "1 + x1^4"),
    ("0", "2 - 1/(1 + x1^2)"),
    ("-x1/(1 + x1^2)", "1"),
];

fn scaled(drift: &str, diffusion: &str, c: f64) -> Model {
    let bd = format!("{c}*({drift})");
    let ad = format!("{c}*({diffusion})");
    Model::load(&two_env(&bd, &ad), 200).unwrap()
}

fn outcome_kinds(m: &Model) -> Vec<(String, Option<usize>, String)> {
    let v = classify_fd_1d(m, &ClassifyOptions::default()).unwrap();
    let mut out: Vec<_> = v
        .evidence
        .iter()
        .map(|e| {
            let kind = serde_json::to_value(&e.verdict.outcome).unwrap()["kind"].as_str().unwrap().to_string();
            (e.test.clone(), e.env, kind)
        })
        .collect();
    out.push(("verdict".into(), None, v.outcome.label().into()));
    out
}

pub fn suite_classify_scaling() -> Result<(), TestError<(usize, f64)>> {
    let base: Vec<_> = SCALING_CORPUS.iter().map(|(b, a)| outcome_kinds(&scaled(b, a, 1.0))).collect();
    let strategy = (0..SCALING_CORPUS.len(), prop_oneof![0.05f64..1.0, 1.0f64..20.0]);
    runner().run(&strategy, |(k, c)| {
        let (drift, diffusion) = SCALING_CORPUS[k];
        let got = outcome_kinds(&scaled(drift, diffusion, c));
        prop_assert_eq!(&got, &base[k], "b = {}, a = {}, c = {}", drift, diffusion, c);
        Ok(())
    })
}

pub fn suite_certificate_scaling() -> Result<(), TestError<(usize, usize, f64, f64)>> {
    let models = [
        Model::load(&one_dim_config(&["0"], &["1"], None, 2.0), 200).unwrap(),
        Model::load(&one_dim_config(&["-x1", "-x1"], &["1", "1"], Some(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]), 2.0), 200)
            .unwrap(),
        Model::load(&two_env("0", "1 + x1^4"), 200).unwrap(),
    ];
    let vs = ["(1 + x1^2)^-1", "(1 + x1^2)^-0.5", "exp(-x1^2)", "1", "(2 + x1^2)^-2"];
    let strategy = (0..models.len(), 0..vs.len(), prop_oneof![1e-3f64..1.0, 1.0f64..1e3], 0.0f64..3.0);
    runner().run(&strategy, |(m, v, lambda, c)| {
        let model = &models[m];
        let k = CompactSet {
            bounds: vec![[-2.0, 2.0]],
            envs: model.env_labels(),
        };
        let cert = |scale: f64| Certificate {
            v: TestFunction::Exprs(vec![parse_expression(&format!("{scale}*{}", vs[v]), 1).unwrap()]),
            kind: CertificateKind::Forward,
            k: k.clone(),
            c_set: None,
            c_or_alpha: c,
        };
        let base = check_forward_certificate(model, &cert(1.0), 101);
        let scaled = check_forward_certificate(model, &cert(lambda), 101);
        prop_assert_eq!(base.passed, scaled.passed);
        prop_assert_eq!(&base.violated_condition, &scaled.violated_condition);
        Ok(())
    })
}
