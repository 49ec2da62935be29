//! Monte Carlo probes of the Feller-Dynkin property: occupation and hitting
//! probabilities of a compact set from starting points escaping to infinity.

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::lyapunov::CompactSet;
use crate::model::Model;
use crate::rng::StreamId;
use crate::sde_sim::{run_path, SimError};

/// Wilson score interval at confidence `1 - 2·(1 - q)` for `hits` out of `n`.
pub fn wilson_interval(hits: u64, n: u64, q: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = Normal::standard().inverse_cdf(q);
    let n_f = n as f64;
    let p = hits as f64 / n_f;
    let z2n = z * z / n_f;
    let center = (p + z2n / 2.0) / (1.0 + z2n);
    let half = z / (1.0 + z2n) * (p * (1.0 - p) / n_f + z2n / (4.0 * n_f)).sqrt();
    ((center - half).clamp(0.0, p), (center + half).clamp(p, 1.0))
}

/// 95% Wilson interval.
pub fn wilson95(hits: u64, n: u64) -> (f64, f64) {
    wilson_interval(hits, n, 0.975)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// `P(X_t ∈ K)`.
    Occupation,
    /// `P(τ_K ≤ t)` on the simulation grid; lower-biased.
    Hitting,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupationEstimate {
    pub kind: ProbeKind,
    pub x: Vec<f64>,
    pub env: usize,
    pub t: f64,
    pub target: CompactSet,
    pub n_paths: u64,
    pub hits: u64,
    /// Paths that left the representable range; never counted as hits.
    pub exploded: u64,
    pub estimate: f64,
    pub ci: (f64, f64),
}

/// Per-path outcome of one probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PathTally {
    pub hit: bool,
    pub exploded: bool,
}

/// Whether path `stream` is in `K` at `t`.
pub fn occupation_path(
    model: &Model,
    x: &[f64],
    i: usize,
    t: f64,
    k: &CompactSet,
    dt: f64,
    stream: StreamId,
) -> Result<PathTally, SimError> {
    let mut last_in = false;
    let summary = run_path(model, x, i, t, dt, stream, |_, y, e| {
        last_in = k.contains(y, e);
        true
    })?;
    let exploded = summary.exploded_at.is_some();
    Ok(PathTally {
        hit: last_in && !exploded,
        exploded,
    })
}

/// Whether path `stream` is in `K` at some grid time up to `alpha`.
pub fn hitting_path(
    model: &Model,
    x: &[f64],
    i: usize,
    alpha: f64,
    k: &CompactSet,
    dt: f64,
    stream: StreamId,
) -> Result<PathTally, SimError> {
    let mut hit = false;
    let summary = run_path(model, x, i, alpha, dt, stream, |_, y, e| {
        hit = k.contains(y, e);
        !hit
    })?;
    Ok(PathTally {
        hit,
        exploded: summary.exploded_at.is_some() && !hit,
    })
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    kind: ProbeKind,
    model: &Model,
    x: &[f64],
    i: usize,
    t: f64,
    k: &CompactSet,
    n_paths: u64,
    dt: f64,
    master_seed: u64,
) -> Result<OccupationEstimate, SimError> {
    let per_path = |p: u64| {
        let stream = StreamId::new(master_seed, p);
        match kind {
            ProbeKind::Occupation => occupation_path(model, x, i, t, k, dt, stream),
            ProbeKind::Hitting => hitting_path(model, x, i, t, k, dt, stream),
        }
    };
    let (hits, exploded) = (0..n_paths)
        .into_par_iter()
        .map(|p| per_path(p).map(|o| (o.hit as u64, o.exploded as u64)))
        .try_reduce(|| (0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))?;
    Ok(OccupationEstimate {
        kind,
        x: x.to_vec(),
        env: i,
        t,
        target: k.clone(),
        n_paths,
        hits,
        exploded,
        estimate: if n_paths == 0 { 0.0 } else { hits as f64 / n_paths as f64 },
        ci: wilson95(hits, n_paths),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_occupation(
    model: &Model,
    x: &[f64],
    i: usize,
    t: f64,
    k: &CompactSet,
    n_paths: u64,
    dt: f64,
    master_seed: u64,
) -> Result<OccupationEstimate, SimError> {
    estimate(ProbeKind::Occupation, model, x, i, t, k, n_paths, dt, master_seed)
}

#[allow(clippy::too_many_arguments)]
pub fn hitting_time_probability(
    model: &Model,
    x: &[f64],
    i: usize,
    k: &CompactSet,
    alpha: f64,
    n_paths: u64,
    dt: f64,
    master_seed: u64,
) -> Result<OccupationEstimate, SimError> {
    estimate(ProbeKind::Hitting, model, x, i, alpha, k, n_paths, dt, master_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmpiricalOutcome {
    ConsistentWithFd,
    InconsistentWithFd,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalVerdict {
    pub ladder: Vec<OccupationEstimate>,
    pub outcome: EmpiricalOutcome,
    pub epsilon: f64,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VerifyError {
    #[error("ladder must have at least 4 strictly increasing radii")]
    BadLadder,
    #[error("t must be positive, got {0}")]
    BadTime(f64),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Occupation probabilities from `x = (r, 0, …, 0)` for each ladder radius.
///
/// Consistent with FD when the last upper confidence bound is below
/// `epsilon` and no larger than the one before; inconsistent when the last
/// two lower bounds exceed `epsilon`.
#[allow(clippy::too_many_arguments)]
pub fn fd_empirical_verdict(
    model: &Model,
    i: usize,
    t: f64,
    k: &CompactSet,
    ladder: &[f64],
    epsilon: f64,
    n_paths: u64,
    dt: f64,
    master_seed: u64,
) -> Result<EmpiricalVerdict, VerifyError> {
    if ladder.len() < 4 || ladder.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(VerifyError::BadLadder);
    }
    if !(t > 0.0) {
        return Err(VerifyError::BadTime(t));
    }
    let mut rungs = Vec::with_capacity(ladder.len());
    for &r in ladder {
        let mut x = vec![0.0; model.dim()];
        x[0] = r;
        rungs.push(estimate_occupation(model, &x, i, t, k, n_paths, dt, master_seed)?);
    }
    let n = rungs.len();
    let (prev, last) = (&rungs[n - 2], &rungs[n - 1]);
    let outcome = if last.ci.1 < epsilon && last.ci.1 <= prev.ci.1 {
        EmpiricalOutcome::ConsistentWithFd
    } else if last.ci.0 > epsilon && prev.ci.0 > epsilon {
        EmpiricalOutcome::InconsistentWithFd
    } else {
        EmpiricalOutcome::Inconclusive
    };
    let mut notes = vec!["C_b-Feller property of the model is assumed, not tested".to_string()];
    let exploded: u64 = rungs.iter().map(|r| r.exploded).sum();
    if exploded > 0 {
        notes.push(format!("{exploded} exploded paths counted as outside K"));
    }
    Ok(EmpiricalVerdict {
        ladder: rungs,
        outcome,
        epsilon,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::one_dim_config;

    fn ou2() -> Model {
        Model::load(
            &one_dim_config(&["-x1", "-x1"], &["1", "1"], Some(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]), 2.0),
            200,
        )
        .unwrap()
    }

    fn k_all() -> CompactSet {
        CompactSet {
            bounds: vec![[-1.0, 1.0]],
            envs: vec![1, 2],
        }
    }

    #[test]
    fn wilson_known_values() {
        // Closed form with z = 1.959963984540054.
        let (lo, hi) = wilson95(0, 10_000);
        let z2 = 1.959963984540054f64.powi(2);
        assert!(lo == 0.0 && (hi - z2 / (10_000.0 + z2)).abs() < 1e-12);
        let (lo, hi) = wilson95(50, 100);
        assert!((lo - 0.40383153).abs() < 1e-6 && (hi - 0.59616847).abs() < 1e-6);
    }

    #[test]
    fn short_time_occupation_is_one() {
        let e = estimate_occupation(&ou2(), &[0.0], 1, 1e-6, &k_all(), 500, 1e-3, 1).unwrap();
        assert_eq!(e.hits, 500);
    }

    #[test]
    fn occupation_from_origin_matches_gaussian() {
        let n = 4000;
        let e = estimate_occupation(&ou2(), &[0.0], 1, 1.0, &k_all(), n, 1e-3, 7).unwrap();
        let sd = ((1.0 - (-2.0f64).exp()) / 2.0).sqrt();
        let exact = 2.0 * Normal::standard().cdf(1.0 / sd) - 1.0;
        let sigma = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((e.estimate - exact).abs() < 3.0 * sigma, "{} vs {exact}", e.estimate);
    }

    #[test]
    fn hitting_dominates_occupation_pathwise() {
        let m = ou2();
        let k = k_all();
        for p in 0..200 {
            let s = StreamId::new(11, p);
            let occ = occupation_path(&m, &[1.5], 1, 0.5, &k, 1e-2, s).unwrap();
            let hit = hitting_path(&m, &[1.5], 1, 0.5, &k, 1e-2, s).unwrap();
            assert!(hit.hit || !occ.hit);
        }
    }

    #[test]
    fn frozen_motion_is_consistent() {
        let m = Model::load(&one_dim_config(&["0"], &["0"], None, 1.0), 200).unwrap();
        let k = CompactSet {
            bounds: vec![[-1.0, 1.0]],
            envs: vec![1],
        };
        let v = fd_empirical_verdict(&m, 1, 1.0, &k, &[2.0, 4.0, 8.0, 16.0], 0.01, 1000, 1e-2, 3).unwrap();
        assert!(v.ladder.iter().all(|r| r.hits == 0));
        assert_eq!(v.outcome, EmpiricalOutcome::ConsistentWithFd);
    }

    #[test]
    fn inside_k_hits_immediately() {
        let e = hitting_time_probability(&ou2(), &[0.5], 2, &k_all(), 1.0, 100, 1e-2, 1).unwrap();
        assert_eq!(e.hits, 100);
    }
}
