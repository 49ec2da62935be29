//! The twelve acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! Lines go to stderr unbuffered so they appear under `cargo test` without
//! `--nocapture`.

mod common;

use std::f64::consts::FRAC_PI_4;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use fellerdyn::classify1d::{classify_fd_1d, ClassifyOptions};
use fellerdyn::ctmc::{birthdeath_rs_test, powerlaw_verdict, simulate_chain};
use fellerdyn::expr::parse_expression;
use fellerdyn::lyapunov::{fit_c, CompactSet, TestFunction};
use fellerdyn::mc_verify::{fd_empirical_verdict, EmpiricalOutcome};
use fellerdyn::model::{one_dim_config, Model, ModelConfig, QMatrixConfig};
use fellerdyn::radial::{
    default_r_grid, default_sphere_samples, khasminskii_p_tests, radial_envelopes, radial_ladder, solve_ode2,
    Direction, RadialEnvelope,
};
use fellerdyn::report::{report_to_string, run, Command, RunConfig};
use fellerdyn::rng::{StreamId, Substream};
use fellerdyn::sde_sim::terminal_state;
use fellerdyn::verdict::{Evidence, FdOutcome, Verdict};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = Result<String, String>;

const SEED: u64 = 20_240_601;
const SWITCH: [[f64; 2]; 2] = [[-1.0, 1.0], [1.0, -1.0]];

fn q2() -> Option<Vec<Vec<f64>>> {
    Some(SWITCH.iter().map(|r| r.to_vec()).collect())
}

fn model(drift: &[&str], diffusion: &[&str], half_width: f64) -> Model {
    Model::load(&one_dim_config(drift, diffusion, q2(), half_width), 200).unwrap()
}

fn switching_ou() -> Model {
    model(&["-x1", "-x1"], &["1", "1"], 1.0)
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let elapsed = start.elapsed();
    check(elapsed < budget, format!("took {elapsed:.2?}, budget {budget:?}"))
}

fn evidence<'a>(v: &'a Verdict, test: &str, env: usize) -> Result<&'a Evidence, String> {
    v.evidence
        .iter()
        .find(|e| e.test == test && e.env == Some(env))
        .ok_or_else(|| format!("no {test} evidence for env {env}"))
}

fn c1_quartic() -> Outcome {
    let start = Instant::now();
    let m = model(&["0", "0"], &["1 + x1^4", "1"], 10.0);
    let v = classify_fd_1d(&m, &ClassifyOptions::default()).map_err(|e| e.to_string())?;
    within_budget(start, Duration::from_secs(5))?;
    check(v.outcome == FdOutcome::NotFellerDynkin, format!("verdict {:?}", v.outcome))?;
    let value = evidence(&v, "driftless_plus", 1)?
        .verdict
        .outcome
        .value()
        .ok_or("shortcut integral did not converge")?;
    // ∫₀^∞ x/(1+x⁴) dx = [½ arctan x²]₀^∞.
    let oracle = 0.5 * f64::INFINITY.atan();
    check((oracle - FRAC_PI_4).abs() < 1e-15, "oracle mismatch")?;
    check((value - oracle).abs() < 1e-4, format!("integral {value} vs {oracle}"))?;
    Ok(format!("not_feller_dynkin, integral {value:.7} (pi/4 {FRAC_PI_4:.7}), {:.2?}", start.elapsed()))
}

fn c2_brownian_ou() -> Outcome {
    let start = Instant::now();
    let full = ClassifyOptions {
        driftless_shortcut: false,
        ..ClassifyOptions::default()
    };
    let mut details = Vec::new();
    for (name, drift) in [("BM", "0"), ("OU", "-x1")] {
        let m = model(&[drift, drift], &["1", "1"], 1.0);
        let v = classify_fd_1d(&m, &ClassifyOptions::default()).map_err(|e| e.to_string())?;
        check(v.outcome == FdOutcome::FellerDynkin, format!("{name}: verdict {:?}", v.outcome))?;
        // Without the shortcut the full a/b integral tests are recorded.
        let v = classify_fd_1d(&m, &full).map_err(|e| e.to_string())?;
        check(v.outcome == FdOutcome::FellerDynkin, format!("{name}: full verdict {:?}", v.outcome))?;
        for env in [1, 2] {
            for test in ["a2", "b2"] {
                let e = evidence(&v, test, env)?;
                check(e.verdict.outcome.diverges(), format!("{name}: {test} env {env} is {:?}", e.verdict.outcome))?;
            }
        }
        details.push(format!("{name} feller_dynkin"));
    }
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!("{}, a2/b2 diverge, {:.2?}", details.join(", "), start.elapsed()))
}

fn brownian(d: usize) -> Model {
    let vars: Vec<String> = (0..d).map(|_| "0".to_string()).collect();
    let diffusion: Vec<Vec<String>> =
        (0..d).map(|r| (0..d).map(|c| if r == c { "1" } else { "0" }.to_string()).collect()).collect();
    let cfg = ModelConfig {
        dimension: d,
        environments: fellerdyn::model::EnvironmentsConfig::Count(1),
        drift: vec![vars],
        diffusion: vec![diffusion],
        qmatrix: None,
        sampling_box: vec![[-1.0, 1.0]; d],
    };
    Model::load(&cfg, 200).unwrap()
}

fn c3_radial() -> Outcome {
    let start = Instant::now();
    let grid = default_r_grid(1e16, 16);
    let e3 = radial_envelopes(&brownian(3), Direction::Upper, &grid, default_sphere_samples(3)).map_err(|e| e.to_string())?;
    let t3 = khasminskii_p_tests(&e3, &radial_ladder()).map_err(|e| e.to_string())?;
    let p = t3.p_limit.outcome.value().ok_or("p(inf) did not converge for d=3")?;
    // p(∞) = ∫₁^∞ y^{-3/2} dy = 2.
    check((p - 2.0).abs() < 1e-4, format!("p(inf) = {p}"))?;
    check(t3.fc1, "FC1 did not fire for d=3")?;
    let e1 = radial_envelopes(&brownian(1), Direction::Upper, &grid, default_sphere_samples(1)).map_err(|e| e.to_string())?;
    let t1 = khasminskii_p_tests(&e1, &radial_ladder()).map_err(|e| e.to_string())?;
    check(t1.fc2 && !t1.fc1, format!("d=1: fc1 {} fc2 {}", t1.fc1, t1.fc2))?;
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!("d=3 p(inf) = {p:.8}, FC1; d=1 FC2; {:.2?}", start.elapsed()))
}

fn c4_ode() -> Outcome {
    let constant = RadialEnvelope::from_fns(Direction::Upper, default_r_grid(100.0, 16), |_| 1.0, |_| 0.0)
        .map_err(|e| e.to_string())?;
    let bm = RadialEnvelope::from_fns(Direction::Upper, default_r_grid(1e5, 16), |r| 2.0 * r, |r| 0.5 / r)
        .map_err(|e| e.to_string())?;
    let quartic = RadialEnvelope::from_fns(
        Direction::Lower,
        default_r_grid(1e5, 16),
        |r| 2.0 * r * (1.0 + 4.0 * r * r),
        |r| 0.5 / r,
    )
    .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (name, env, r_max) in [("constant", &constant, 20.0), ("BM", &bm, 1e4), ("quartic", &quartic, 1e4)] {
        let sol = solve_ode2(env, r_max).map_err(|e| format!("{name}: {e}"))?;
        check(sol.residual_max < 1e-6, format!("{name}: residual {}", sol.residual_max))?;
        worst = worst.max(sol.residual_max);
        if name == "constant" {
            for (r, u) in sol.grid.iter().zip(&sol.u) {
                let exact = (-(2f64.sqrt()) * (r - 0.5)).exp();
                check((u - exact).abs() < 1e-5, format!("constant: u({r}) = {u} vs {exact}"))?;
            }
        }
    }
    Ok(format!("max residual {worst:.2e}, constant case matches closed form"))
}

fn c5_fit_c() -> Outcome {
    let m = Model::load(&one_dim_config(&["0"], &["1"], None, 2.0), 200).unwrap();
    let v = TestFunction::Exprs(vec![parse_expression("(1 + x1^2)^-1", 1).unwrap()]);
    let fit = fit_c(&m, &v, 201).map_err(|e| e.to_string())?;
    // LV/V = (3x²-1)/(1+x²)², searched on a dense grid.
    let n = 1_000_000;
    let oracle = (0..=n)
        .map(|k| -10.0 + 20.0 * k as f64 / n as f64)
        .map(|x: f64| (3.0 * x * x - 1.0) / (1.0 + x * x).powi(2))
        .fold(f64::NEG_INFINITY, f64::max);
    check((oracle - 0.5625).abs() < 1e-6, format!("grid oracle {oracle}"))?;
    check((fit.c - oracle).abs() < 1e-4, format!("fit_c {} vs {oracle}", fit.c))?;
    Ok(format!("fit_c = {:.7}, grid oracle {oracle:.7}", fit.c))
}

/// FD iff α ≤ 1, or α ∈ (1, 2] with λ = μ.
fn birthdeath_oracle(alpha: f64, lambda: f64, mu: f64) -> bool {
    alpha <= 1.0 || (alpha <= 2.0 && lambda == mu)
}

fn c6_birthdeath() -> Outcome {
    let start = Instant::now();
    let alphas = [0.0, 0.5, 0.9, 1.0, 1.5, 1.8, 2.0, 2.5, 3.0, 4.0];
    let rates = [(1.0, 1.0), (1.0, 2.0), (2.0, 1.0), (0.5, 0.5), (3.0, 1.0)];
    let mut definite = 0;
    for &alpha in &alphas {
        for &(lambda, mu) in &rates {
            let closed = powerlaw_verdict(alpha, lambda, mu);
            check(
                closed == birthdeath_oracle(alpha, lambda, mu),
                format!("closed form disagrees with oracle at ({alpha}, {lambda}, {mu})"),
            )?;
            if let Some(both) = birthdeath_rs_test(alpha, lambda, mu, 100_000).both_diverge() {
                definite += 1;
                check(both == closed, format!("series says {both} at ({alpha}, {lambda}, {mu})"))?;
            }
        }
    }
    let unit = birthdeath_rs_test(1.0, 1.0, 1.0, 100_000);
    check(unit.r_verdict.outcome.diverges() && unit.s_verdict.outcome.diverges(), "(1,1,1) not both diverging")?;
    let cubic = birthdeath_rs_test(3.0, 1.0, 2.0, 100_000);
    check(cubic.s_verdict.outcome.converges(), format!("(3,1,2) s is {:?}", cubic.s_verdict.outcome))?;
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!("{definite}/50 definite and all agree; (1,1,1) both diverge; (3,1,2) s converges; {:.2?}", start.elapsed()))
}

fn sigma(p: f64, n: f64) -> f64 {
    (p * (1.0 - p) / n).sqrt()
}

fn c7_chain() -> Outcome {
    let m = switching_ou();
    let n = 100_000u64;
    let stays: u64 = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut rng = StreamId::new(SEED, p).rng(Substream::Chain);
            u64::from(simulate_chain(m.q(), 1, 2.0, &mut rng).unwrap().final_state() == 1)
        })
        .sum();
    let oracle = 0.5 * (1.0 + (-4.0f64).exp());
    let est = stays as f64 / n as f64;
    let s = sigma(oracle, n as f64);
    check((est - oracle).abs() < 3.0 * s, format!("P = {est} vs {oracle}, sigma {s:.2e}"))?;
    Ok(format!("P(Z_2 = start) = {est:.5} vs {oracle:.5} ({:.2} sigma)", (est - oracle) / s))
}

struct Terminals {
    ys: Vec<f64>,
    stays: u64,
}

fn terminals(m: &Model, n: u64, seed: u64) -> Result<Terminals, String> {
    let out = (0..n)
        .into_par_iter()
        .map(|p| terminal_state(m, &[1.0], 1, 1.0, 1e-3, StreamId::new(seed, p)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    check(out.iter().all(|t| !t.exploded), "exploded path")?;
    Ok(Terminals {
        ys: out.iter().map(|t| t.y[0]).collect(),
        stays: out.iter().filter(|t| t.env == 1).count() as u64,
    })
}

fn c8_moments(store: &mut Option<Terminals>) -> Outcome {
    let start = Instant::now();
    let n = 100_000u64;
    let t = terminals(&switching_ou(), n, SEED)?;
    let elapsed = start.elapsed();
    let nf = n as f64;
    let mean = t.ys.iter().sum::<f64>() / nf;
    let var = t.ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let (mean_oracle, var_oracle) = ((-1.0f64).exp(), (1.0 - (-2.0f64).exp()) / 2.0);
    let mean_sigma = (var_oracle / nf).sqrt();
    let var_sigma = var_oracle * (2.0 / (nf - 1.0)).sqrt();
    *store = Some(t);
    check((mean - mean_oracle).abs() < 3.0 * mean_sigma, format!("mean {mean} vs {mean_oracle}"))?;
    check((var - var_oracle).abs() < 3.0 * var_sigma, format!("variance {var} vs {var_oracle}"))?;
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:.2?}, budget 60s"))?;
    Ok(format!(
        "mean {mean:.5} ({:.2} sigma), variance {var:.5} ({:.2} sigma), {elapsed:.2?}",
        (mean - mean_oracle) / mean_sigma,
        (var - var_oracle) / var_sigma
    ))
}

fn c9_cross(reference: Option<&Terminals>) -> Outcome {
    let reference = reference.ok_or("criterion 8 produced no reference sample")?;
    let mut cfg = one_dim_config(&["-x1", "-x1"], &["1", "1"], None, 1.0);
    cfg.qmatrix = Some(QMatrixConfig::StateDependent(vec![
        vec!["-1".into(), "1".into()],
        vec!["1".into(), "-1".into()],
    ]));
    let m = Model::load(&cfg, 200).unwrap();
    check(!m.q().is_state_independent(), "constant-rate model was not treated as state dependent")?;
    let n = 100_000u64;
    let t = terminals(&m, n, SEED + 1)?;
    let nf = n as f64;
    let (p_dep, p_ind) = (t.stays as f64 / nf, reference.stays as f64 / nf);
    let oracle = 0.5 * (1.0 + (-2.0f64).exp());
    let s = sigma(oracle, nf);
    let s_diff = s * 2f64.sqrt();
    check((p_dep - p_ind).abs() < 3.0 * s_diff, format!("state-dependent {p_dep} vs state-independent {p_ind}"))?;
    check((p_dep - oracle).abs() < 3.0 * s, format!("state-dependent {p_dep} vs exact {oracle}"))?;
    Ok(format!(
        "P(Z_1 = start): joint small-step {p_dep:.5}, segment-exact {p_ind:.5}, exact {oracle:.5} ({:.2} sigma apart)",
        (p_dep - p_ind) / s_diff
    ))
}

fn c10_empirical() -> Outcome {
    let m = switching_ou();
    let k = CompactSet {
        bounds: vec![[-1.0, 1.0]],
        envs: vec![1, 2],
    };
    let v = fd_empirical_verdict(&m, 1, 1.0, &k, &[2.0, 5.0, 10.0, 20.0], 0.01, 10_000, 1e-3, SEED)
        .map_err(|e| e.to_string())?;
    check(v.outcome == EmpiricalOutcome::ConsistentWithFd, format!("outcome {:?}", v.outcome))?;
    let at10 = v.ladder.iter().find(|r| r.x[0] == 10.0).ok_or("no rung at x = 10")?;
    // Y_1 ~ N(10/e, (1 - e^{-2})/2) in every environment.
    let sd = ((1.0 - (-2.0f64).exp()) / 2.0).sqrt();
    let mean = 10.0 * (-1.0f64).exp();
    let phi = Normal::standard();
    let oracle = phi.cdf((1.0 - mean) / sd) - phi.cdf((-1.0 - mean) / sd);
    check(at10.ci.1 < 1e-3, format!("upper CI at x=10 is {}", at10.ci.1))?;
    check(at10.ci.0 <= oracle && oracle <= at10.ci.1, format!("CI {:?} excludes oracle {oracle:.2e}", at10.ci))?;
    Ok(format!(
        "ConsistentWithFD; x=10: {} hits / {}, CI [{:.1e}, {:.1e}], oracle {oracle:.1e}",
        at10.hits, at10.n_paths, at10.ci.0, at10.ci.1
    ))
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Report bytes with the version line blanked.
pub fn without_version(text: &str) -> String {
    text.lines()
        .map(|l| if l.trim_start().starts_with("\"tool_version\"") { "  \"tool_version\": \"*\"," } else { l })
        .collect::<Vec<_>>()
        .join("\n")
}

fn c11_determinism() -> Outcome {
    let cases = [
        (Command::Simulate, "switching_ou_simulate.json"),
        (Command::VerifyFd, "switching_ou_verify_fd.json"),
    ];
    let config_text = std::fs::read_to_string(golden_dir().join("switching_ou.config.json")).map_err(|e| e.to_string())?;
    let config = RunConfig::from_json(&config_text).map_err(|e| e.to_string())?;
    for (command, golden) in cases {
        let expected = std::fs::read_to_string(golden_dir().join(golden)).map_err(|e| format!("{golden}: {e}"))?;
        for threads in [1, 4, 16] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let out = pool.install(|| run(command, &config, false)).map_err(|e| e.to_string())?;
            let text = report_to_string(&out.report);
            check(
                without_version(&text) == without_version(&expected),
                format!("{} with {threads} threads differs from {golden}", command.name()),
            )?;
        }
    }
    Ok("simulate and verify-fd reports identical to goldens at 1, 4 and 16 threads".into())
}

fn c12_properties() -> Outcome {
    let mut done = Vec::new();
    macro_rules! suite {
        ($name:literal, $f:expr) => {
            $f.map_err(|e| format!("{}: {e}", $name))?;
            done.push($name);
        };
    }
    suite!("parser round trip", common::suite_parser_round_trip());
    suite!("derivatives", common::suite_derivatives());
    suite!("generator linearity", common::suite_generator_linearity());
    suite!("classify1d scaling", common::suite_classify_scaling());
    suite!("certificate scaling", common::suite_certificate_scaling());
    Ok(format!("{} suites x {} cases: {}", done.len(), common::SUITE_CASES, done.join(", ")))
}

fn report(number: usize, name: &str, outcome: &Outcome) {
    let line = match outcome {
        Ok(detail) => format!("acceptance {number:>2} PASS {name}: {detail}\n"),
        Err(why) => format!("acceptance {number:>2} FAIL {name}: {why}\n"),
    };
    let _ = std::io::stderr().write_all(line.as_bytes());
}

type Criterion = Box<dyn FnOnce(&mut Option<Terminals>) -> Outcome>;

#[test]
fn acceptance() {
    let mut reference = None;
    let criteria: Vec<(&str, Criterion)> = vec![
        ("quartic oracle", Box::new(|_| c1_quartic())),
        ("Brownian/OU oracles", Box::new(|_| c2_brownian_ou())),
        ("radial closed form", Box::new(|_| c3_radial())),
        ("ODE residual", Box::new(|_| c4_ode())),
        ("Lyapunov optimum", Box::new(|_| c5_fit_c())),
        ("birth-death", Box::new(|_| c6_birthdeath())),
        ("chain marginal", Box::new(|_| c7_chain())),
        ("switching-diffusion moments", Box::new(c8_moments)),
        ("cross-simulator", Box::new(|r| c9_cross(r.as_ref()))),
        ("empirical FD probe", Box::new(|_| c10_empirical())),
        ("determinism", Box::new(|_| c11_determinism())),
        ("property suites", Box::new(|_| c12_properties())),
    ];
    let mut failed = Vec::new();
    for (k, (name, f)) in criteria.into_iter().enumerate() {
        let outcome = f(&mut reference);
        report(k + 1, name, &outcome);
        if outcome.is_err() {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
