use std::fs;
use std::io::{self, IsTerminal, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fellerdyn::report::{emit_report, run, Command, Overrides, Report, RunConfig, RunError};

#[derive(Parser, Debug)]
#[command(name = "fellerdyn", version, about = "Feller-Dynkin diagnostics for switching diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// JSON run configuration (model plus knobs).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Report destination; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// CSV path dump (simulate only).
    #[arg(long, global = true)]
    paths_out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "FELLERDYN_THREADS")]
    threads: Option<usize>,
    /// Never print the human summary.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Exact integral tests for one-dimensional models.
    Classify1d(Knobs),
    /// Radial envelope tests in any dimension.
    Radial(Knobs),
    /// Check a forward or reject Lyapunov certificate.
    LyapunovCheck(Knobs),
    /// Series test for a power-law birth-death chain.
    Birthdeath(Knobs),
    /// Simulate paths and summarise the terminal distribution.
    Simulate(Knobs),
    /// Analytic verdict plus Monte Carlo cross-check.
    VerifyFd(Knobs),
    /// Growth and existence diagnostics.
    ExistenceCheck(Knobs),
}

#[derive(Args, Debug, Default)]
struct Knobs {
    #[arg(long)]
    tol: Option<f64>,
    /// Comma-separated radii.
    #[arg(long, value_delimiter = ',')]
    ladder: Option<Vec<f64>>,
    #[arg(long)]
    n_paths: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    grid_density: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    n_terms: Option<usize>,
    /// Comma-separated start point.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long)]
    env: Option<usize>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
}

impl Sub {
    fn split(self) -> (Command, Knobs) {
        match self {
            Sub::Classify1d(k) => (Command::Classify1d, k),
            Sub::Radial(k) => (Command::Radial, k),
            Sub::LyapunovCheck(k) => (Command::LyapunovCheck, k),
            Sub::Birthdeath(k) => (Command::Birthdeath, k),
            Sub::Simulate(k) => (Command::Simulate, k),
            Sub::VerifyFd(k) => (Command::VerifyFd, k),
            Sub::ExistenceCheck(k) => (Command::ExistenceCheck, k),
        }
    }
}

fn summary(report: &Report) -> String {
    let verdict = report
        .verdict
        .map_or("none".to_string(), |v| serde_json::to_value(v).unwrap().as_str().unwrap_or("?").to_string());
    let mut s = format!("{}: verdict {verdict}\n", report.command);
    for n in &report.notes {
        s.push_str(&format!("  note: {n}\n"));
    }
    s
}

fn execute(cli: Cli) -> Result<i32, RunError> {
    let (command, k) = cli.command.split();
    let mut config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::from_json("{}")?,
    };
    config.apply(&Overrides {
        seed: cli.seed,
        tol: k.tol,
        ladder: k.ladder,
        n_paths: k.n_paths,
        dt: k.dt,
        n_max: k.n_max,
        grid_density: k.grid_density,
        alpha: k.alpha,
        lambda: k.lambda,
        mu: k.mu,
        n_terms: k.n_terms,
        x0: k.x0,
        env: k.env,
        t_end: k.t_end,
        epsilon: k.epsilon,
    })?;
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let output = run(command, &config, cli.paths_out.is_some())?;
    if let (Some(path), Some(csv)) = (&cli.paths_out, &output.paths_csv) {
        fs::write(path, csv)?;
    }
    match &cli.out {
        Some(path) => {
            let mut buf = Vec::new();
            emit_report(&output.report, &mut buf)?;
            fs::write(path, buf)?;
            if !cli.json && io::stdout().is_terminal() {
                print!("{}", summary(&output.report));
            }
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            emit_report(&output.report, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(output.report.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("fellerdyn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
