//! Continuous-time Markov chains: exact simulation for state-independent
//! rates and the birth-death `r`/`s` series.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;
use thiserror::Error;

use crate::model::{BirthDeathRates, QMatrixSpec};
use crate::quadrature::{assess_partials, DivergenceVerdict, LadderRule};

/// Jump cap for a single path; only reachable by explosive chains.
pub const MAX_JUMPS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("exact chain simulation needs state-independent rates")]
    StateDependent,
    #[error("state {0} is outside the chain's state space")]
    UnknownState(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainPath {
    /// `τ_0 = 0 < τ_1 < …`, all at most `t_end`.
    pub times: Vec<f64>,
    /// State entered at the corresponding jump time.
    pub states: Vec<usize>,
    pub t_end: f64,
    /// Set when [`MAX_JUMPS`] was reached before `t_end`.
    pub truncated: bool,
}

impl ChainPath {
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        self.states[k.max(1) - 1]
    }

    pub fn final_state(&self) -> usize {
        *self.states.last().expect("path has an initial state")
    }

    pub fn jumps(&self) -> usize {
        self.times.len() - 1
    }
}

fn check_state(q: &QMatrixSpec, i: usize) -> Result<(), ChainError> {
    match q.n_states() {
        Some(n) if i == 0 || i > n => Err(ChainError::UnknownState(i)),
        _ => Ok(()),
    }
}

/// Draws the next `(holding time, target)` out of `state`; `None` if absorbing.
pub fn next_jump<R: Rng + ?Sized>(q: &QMatrixSpec, state: usize, rng: &mut R) -> Option<(f64, usize)> {
    let out = q.off_diagonal(state, &[]);
    let rate: f64 = out.iter().map(|(_, r)| r).sum();
    if rate <= 0.0 {
        return None;
    }
    let e: f64 = Exp1.sample(rng);
    let hold = e / rate;
    let mut u = rng.random::<f64>() * rate;
    let mut target = out[out.len() - 1].0;
    for (j, r) in &out {
        if u < *r {
            target = *j;
            break;
        }
        u -= r;
    }
    Some((hold, target))
}

/// Exact (Gillespie) simulation on `[0, t_end]` started in `i0`.
pub fn simulate_chain<R: Rng + ?Sized>(
    q: &QMatrixSpec,
    i0: usize,
    t_end: f64,
    rng: &mut R,
) -> Result<ChainPath, ChainError> {
    if !q.is_state_independent() {
        return Err(ChainError::StateDependent);
    }
    check_state(q, i0)?;
    let mut path = ChainPath {
        times: vec![0.0],
        states: vec![i0],
        t_end,
        truncated: false,
    };
    let mut t = 0.0;
    let mut state = i0;
    while let Some((hold, target)) = next_jump(q, state, rng) {
        t += hold;
        if t > t_end {
            break;
        }
        if path.times.len() > MAX_JUMPS {
            path.truncated = true;
            break;
        }
        path.times.push(t);
        path.states.push(target);
        state = target;
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesReport {
    /// `(n, r_n)` at the ladder rungs; saturates to `+∞` past `f64::MAX`.
    pub r_partial_sums: Vec<(f64, f64)>,
    pub s_partial_sums: Vec<(f64, f64)>,
    /// Natural logarithms of the same partial sums, always finite.
    pub r_log_partial_sums: Vec<(f64, f64)>,
    pub s_log_partial_sums: Vec<(f64, f64)>,
    pub r_verdict: DivergenceVerdict,
    pub s_verdict: DivergenceVerdict,
    pub n_terms: usize,
}

impl SeriesReport {
    /// `Some(true)` when both series diverge, `Some(false)` when one converges.
    pub fn both_diverge(&self) -> Option<bool> {
        let (r, s) = (&self.r_verdict.outcome, &self.s_verdict.outcome);
        if r.diverges() && s.diverges() {
            Some(true)
        } else if r.converges() || s.converges() {
            Some(false)
        } else {
            None
        }
    }
}

/// `ln(e^a + e^b)`.
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Rungs at half decades `10², 10^2.5, …` up to `n_terms`.
pub fn series_ladder(n_terms: usize) -> Vec<usize> {
    (4..=10)
        .map(|k| 10f64.powf(k as f64 / 2.0).round() as usize)
        .filter(|&n| n <= n_terms)
        .collect()
}

/// Partial sums of the birth-death series with `λ_n = n^α λ`, `μ_n = n^α μ`:
///
/// `r = Σ_n T_n` with `T_n = 1/λ_n + (μ_n/λ_n) T_{n-1}`, and
/// `s = Σ_n U_n/μ_{n+1}` with `U_n = 1 + (λ_n/μ_n) U_{n-1}`, `U_0 = 1`.
///
/// Both recursions run on logarithms, so no term can overflow.
pub fn birthdeath_rs_test(alpha: f64, lambda: f64, mu: f64, n_terms: usize) -> SeriesReport {
    let n_terms = n_terms.clamp(1, 100_000);
    let rates = BirthDeathRates { alpha, lambda, mu };
    let rungs = series_ladder(n_terms);
    let (mut log_t, mut log_u) = (f64::NEG_INFINITY, 0.0);
    let (mut log_r, mut log_s) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut r_log = Vec::new();
    let mut s_log = Vec::new();
    let mut next_rung = 0;
    for n in 1..=n_terms {
        let (ll, lm) = (rates.birth(n).ln(), rates.death(n).ln());
        log_t = log_add(-ll, lm - ll + log_t);
        log_u = log_add(0.0, ll - lm + log_u);
        log_r = log_add(log_r, log_t);
        log_s = log_add(log_s, log_u - rates.death(n + 1).ln());
        if next_rung < rungs.len() && n == rungs[next_rung] {
            r_log.push((n as f64, log_r));
            s_log.push((n as f64, log_s));
            next_rung += 1;
        }
    }
    let exp = |v: &[(f64, f64)]| v.iter().map(|(n, l)| (*n, l.exp())).collect::<Vec<_>>();
    let (r_partial_sums, s_partial_sums) = (exp(&r_log), exp(&s_log));
    let rule = LadderRule {
        tail_ratio: Some(0.8),
        ..LadderRule::default()
    };
    SeriesReport {
        r_verdict: assess_partials(&r_partial_sums, &rule),
        s_verdict: assess_partials(&s_partial_sums, &rule),
        r_partial_sums,
        s_partial_sums,
        r_log_partial_sums: r_log,
        s_log_partial_sums: s_log,
        n_terms,
    }
}

/// Closed-form criterion for `r = s = ∞` under power-law rates. The test
/// `λ == μ` is exact floating-point equality.
pub fn powerlaw_verdict(alpha: f64, lambda: f64, mu: f64) -> bool {
    alpha <= 1.0 || (alpha <= 2.0 && lambda == mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{StreamId, Substream};
    use crate::quadrature::Outcome;

    #[test]
    fn slow_power_tail_is_extrapolated() {
        // λ = μ makes U_n = n + 1, so s = Σ_{m≥2} 1/m² = π²/6 - 1.
        let rep = birthdeath_rs_test(3.0, 1.0, 1.0, 100_000);
        let exact = std::f64::consts::PI.powi(2) / 6.0 - 1.0;
        let Outcome::Converges(est) = &rep.s_verdict.outcome else {
            panic!("s should converge: {:?}", rep.s_verdict);
        };
        assert!((est.value - exact).abs() <= est.abs_error, "{est:?} vs {exact}");
        // the extrapolated tail should remove most of the truncation error
        assert!((est.value - exact).abs() < 0.1 * est.abs_error, "{est:?}");
        assert!(rep.r_verdict.outcome.diverges());
    }

    #[test]
    fn constant_rates_grow_quadratically() {
        let rep = birthdeath_rs_test(0.0, 1.0, 1.0, 1000);
        // T_n = n, so r_n = n(n+1)/2.
        let (n, r) = rep.r_partial_sums[0];
        assert_eq!(n, 100.0);
        assert!((r - 5050.0).abs() < 1e-8);
        assert_eq!(rep.both_diverge(), Some(true));
    }

    #[test]
    fn powerlaw_examples() {
        assert!(powerlaw_verdict(0.5, 1.0, 3.0));
        assert!(powerlaw_verdict(1.5, 2.0, 2.0));
        assert!(!powerlaw_verdict(1.5, 1.0, 2.0));
        assert!(!powerlaw_verdict(3.0, 1.0, 1.0));
    }

    #[test]
    fn cubic_rates_make_s_converge() {
        let rep = birthdeath_rs_test(3.0, 1.0, 2.0, 100_000);
        assert!(rep.s_verdict.outcome.converges(), "{:?}", rep.s_verdict);
        assert!(rep.r_verdict.outcome.diverges());
        assert_eq!(rep.both_diverge(), Some(false));
    }

    #[test]
    fn partial_sums_are_nondecreasing() {
        for (a, l, m) in [(0.0, 1.0, 5.0), (2.0, 3.0, 1.0), (1.0, 1.0, 1.0)] {
            let rep = birthdeath_rs_test(a, l, m, 100_000);
            for w in rep.r_log_partial_sums.windows(2).chain(rep.s_log_partial_sums.windows(2)) {
                assert!(w[1].1 >= w[0].1);
                assert!(w[1].1.is_finite());
            }
        }
    }

    #[test]
    fn single_state_never_jumps() {
        let q = QMatrixSpec::Dense(vec![vec![0.0]]);
        let mut rng = StreamId::new(1, 0).rng(Substream::Chain);
        let p = simulate_chain(&q, 1, 10.0, &mut rng).unwrap();
        assert_eq!(p.jumps(), 0);
        assert_eq!(p.state_at(5.0), 1);
    }

    #[test]
    fn path_invariants() {
        let q = QMatrixSpec::Dense(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]);
        let mut rng = StreamId::new(3, 0).rng(Substream::Chain);
        let p = simulate_chain(&q, 1, 50.0, &mut rng).unwrap();
        assert!(p.times.windows(2).all(|w| w[0] < w[1]));
        assert!(p.states.windows(2).all(|w| w[0] != w[1]));
        assert!(*p.times.last().unwrap() <= 50.0);
        assert!(p.jumps() > 10);
    }

    #[test]
    fn birth_death_chain_moves_by_one() {
        let q = QMatrixSpec::BirthDeath(BirthDeathRates { alpha: 1.0, lambda: 1.0, mu: 1.0 });
        let mut rng = StreamId::new(5, 0).rng(Substream::Chain);
        let p = simulate_chain(&q, 0, 5.0, &mut rng).unwrap();
        assert!(p.states.windows(2).all(|w| w[0].abs_diff(w[1]) == 1));
    }
}
