//! Adaptive quadrature and improper-integral divergence probing.
//!
//! Every integral test in the crate reduces to deciding whether some
//! `∫_lo^∞ f` is finite. Floating point cannot decide that exactly, so
//! [`probe_divergence`] walks a ladder of truncation points and returns a
//! three-valued [`DivergenceVerdict`].

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadError {
    #[error("integrand is not finite at {point} (value {value})")]
    NonFinite { point: f64, value: f64 },
    #[error("more than {limit} panels needed on [{lo}, {hi}]")]
    MaxSubdivisions { lo: f64, hi: f64, limit: usize },
    #[error("tail integral from {from} did not settle before {reached}")]
    TailNotConverged { from: f64, reached: f64 },
}

impl QuadError {
    /// The integrand overflowed to `+∞`, which for a nonnegative integrand
    /// means the integral is astronomically large.
    pub fn is_positive_overflow(&self) -> bool {
        matches!(self, QuadError::NonFinite { value, .. } if *value == f64::INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegralEstimate {
    pub value: f64,
    pub abs_error: f64,
    pub subdivisions: usize,
}

pub const MAX_PANELS: usize = 1_000_000;

// 15-point Kronrod abscissae/weights with the embedded 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

struct Panel {
    lo: f64,
    hi: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error) == Ordering::Equal
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn checked<F: Fn(f64) -> f64>(f: &F, x: f64) -> Result<f64, QuadError> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(QuadError::NonFinite { point: x, value: v })
    }
}

fn gk15<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> Result<Panel, QuadError> {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let fc = checked(f, center)?;
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    let mut abs_sum = kronrod.abs();
    let mut fv1 = [0.0; 7];
    let mut fv2 = [0.0; 7];
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = checked(f, center - dx)?;
        let f2 = checked(f, center + dx)?;
        fv1[j] = f1;
        fv2[j] = f2;
        kronrod += WGK[j] * (f1 + f2);
        abs_sum += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = kronrod * 0.5;
    let mut asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = kronrod * half;
    let abs_sum = abs_sum * half.abs();
    let asc = asc * half.abs();
    let mut error = ((kronrod - gauss) * half).abs();
    if asc != 0.0 && error != 0.0 {
        error = asc * (200.0 * error / asc).powf(1.5).min(1.0);
    }
    if abs_sum > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(50.0 * f64::EPSILON * abs_sum);
    }
    Ok(Panel { lo, hi, value, error })
}

/// Adaptive bisection with a 7/15-point Gauss–Kronrod pair until
/// `err ≤ max(abs_tol, rel_tol·|value|)`.
pub fn integrate_tol<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<IntegralEstimate, QuadError> {
    if lo == hi {
        return Ok(IntegralEstimate {
            value: 0.0,
            abs_error: 0.0,
            subdivisions: 0,
        });
    }
    let first = gk15(&f, lo, hi)?;
    let mut value = first.value;
    let mut error = first.error;
    let mut heap = BinaryHeap::new();
    heap.push(first);
    let mut panels = 1;
    while error > abs_tol.max(rel_tol * value.abs()) {
        let worst = match heap.pop() {
            Some(p) => p,
            None => break,
        };
        let mid = 0.5 * (worst.lo + worst.hi);
        // Panel too narrow to split: accept the remaining error.
        if mid <= worst.lo || mid >= worst.hi || (worst.hi - worst.lo) < 4.0 * f64::EPSILON * mid.abs() {
            heap.push(worst);
            break;
        }
        if panels >= MAX_PANELS {
            return Err(QuadError::MaxSubdivisions {
                lo,
                hi,
                limit: MAX_PANELS,
            });
        }
        let left = gk15(&f, worst.lo, mid)?;
        let right = gk15(&f, mid, worst.hi)?;
        value += left.value + right.value - worst.value;
        error += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
        panels += 1;
        // Re-sum periodically to purge accumulated cancellation.
        if panels % 256 == 0 {
            value = heap.iter().map(|p| p.value).sum();
            error = heap.iter().map(|p| p.error).sum();
        }
    }
    let value = heap.iter().map(|p| p.value).sum();
    let abs_error = heap.iter().map(|p| p.error).sum();
    Ok(IntegralEstimate {
        value,
        abs_error,
        subdivisions: panels,
    })
}

/// `∫_lo^hi f` to within `max(tol, 1e-12·|value|)`.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<IntegralEstimate, QuadError> {
    integrate_tol(f, lo, hi, tol, 1e-12)
}

/// Where the mass of a peaked integrand sits relative to `anchor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PanelRange {
    /// `∫_anchor^∞`.
    RightToInfinity,
    /// `∫_anchor^limit` with `limit > anchor`.
    RightTo(f64),
}

/// Integrates a function whose mass concentrates next to `anchor`, using
/// panels of width `scale·2^k` laid out away from the anchor. Plain
/// bisection from the full interval would miss a spike narrower than the
/// outermost Kronrod node spacing.
pub fn integrate_from_anchor<F: Fn(f64) -> f64>(
    f: F,
    anchor: f64,
    range: PanelRange,
    scale: f64,
    rel_tol: f64,
) -> Result<IntegralEstimate, QuadError> {
    let scale = scale.max(f64::EPSILON * (1.0 + anchor.abs()));
    let mut total = 0.0;
    let mut abs_error = 0.0;
    let mut subdivisions = 0;
    let mut width = scale;
    let mut near = anchor;
    let mut small_run = 0;
    let mut prev_piece: Option<f64> = None;
    loop {
        let (lo, hi, last) = match range {
            PanelRange::RightToInfinity => (near, near + width, false),
            PanelRange::RightTo(limit) => {
                let far = (near + width).min(limit);
                (near, far, far >= limit)
            }
        };
        if hi <= lo {
            break;
        }
        let piece = integrate_tol(&f, lo, hi, 0.0, rel_tol.max(1e-13))?;
        total += piece.value;
        abs_error += piece.abs_error;
        subdivisions += piece.subdivisions;
        if last {
            break;
        }
        if matches!(range, PanelRange::RightToInfinity) {
            let tiny = piece.value.abs() <= 1e-3 * rel_tol * total.abs();
            small_run = if tiny { small_run + 1 } else { 0 };
            if small_run >= 2 || (total == 0.0 && piece.value == 0.0 && subdivisions > 400) {
                if let Some(prev) = prev_piece {
                    let ratio = (piece.value / prev).abs();
                    if ratio < 1.0 {
                        abs_error += piece.value.abs() * ratio / (1.0 - ratio);
                    } else {
                        abs_error += piece.value.abs();
                    }
                }
                break;
            }
            if hi > 1e300 {
                return Err(QuadError::TailNotConverged {
                    from: anchor,
                    reached: hi,
                });
            }
        }
        prev_piece = Some(piece.value);
        near = hi;
        width *= 2.0;
    }
    Ok(IntegralEstimate {
        value: total,
        abs_error,
        subdivisions,
    })
}

// ---------------------------------------------------------------------------
// Divergence probing

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Converges(IntegralEstimate),
    Diverges,
    Inconclusive,
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Converges(_) => "converges",
            Outcome::Diverges => "diverges",
            Outcome::Inconclusive => "inconclusive",
        }
    }

    pub fn is_definite(&self) -> bool {
        !matches!(self, Outcome::Inconclusive)
    }

    pub fn converges(&self) -> bool {
        matches!(self, Outcome::Converges(_))
    }

    pub fn diverges(&self) -> bool {
        matches!(self, Outcome::Diverges)
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Outcome::Converges(e) => Some(e.value),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceVerdict {
    pub outcome: Outcome,
    /// `(R, ∫_lo^R f)` for every rung evaluated, in increasing `R`.
    pub ladder: Vec<(f64, f64)>,
    pub rationale: String,
}

impl DivergenceVerdict {
    pub fn diverges(reason: impl Into<String>) -> Self {
        DivergenceVerdict {
            outcome: Outcome::Diverges,
            ladder: Vec::new(),
            rationale: reason.into(),
        }
    }

    pub fn inconclusive(reason: impl Into<String>) -> Self {
        DivergenceVerdict {
            outcome: Outcome::Inconclusive,
            ladder: Vec::new(),
            rationale: reason.into(),
        }
    }
}

/// Thresholds of the ladder rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderRule {
    /// Plateau: increment below `plateau_rel·partial` on two consecutive rungs.
    pub plateau_rel: f64,
    /// Growth: each of the last three increments at least this fraction of its predecessor.
    pub growth_ratio: f64,
    /// Any partial above this counts as divergent.
    pub blowup: f64,
    /// Series only: converged when the last three increment ratios are at
    /// most this and agree within a factor 1.25 (a power-law tail on
    /// geometric rungs). The extrapolated tail is the error estimate.
    pub tail_ratio: Option<f64>,
}

impl Default for LadderRule {
    fn default() -> Self {
        LadderRule {
            plateau_rel: 1e-6,
            growth_ratio: 0.9,
            blowup: 1e12,
            tail_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LadderDecision {
    Converges,
    /// Converged with the given extrapolated tail.
    ConvergesWithTail(f64),
    Diverges(String),
    Undecided,
}

impl LadderRule {
    /// Applies the rule to the partial values seen so far (nondecreasing).
    pub fn decide(&self, partials: &[f64]) -> LadderDecision {
        let k = partials.len();
        if k == 0 {
            return LadderDecision::Undecided;
        }
        let last = partials[k - 1];
        if last > self.blowup {
            return LadderDecision::Diverges(format!("partial {last:e} exceeds {:e}", self.blowup));
        }
        let inc = |j: usize| if j == 0 { partials[0] } else { partials[j] - partials[j - 1] };
        if k >= 3 {
            let plateau = |j: usize| inc(j) <= self.plateau_rel * partials[j].abs();
            if plateau(k - 1) && plateau(k - 2) {
                return LadderDecision::Converges;
            }
        }
        if let (Some(max_ratio), true) = (self.tail_ratio, k >= 4) {
            let ratios: Vec<f64> = (k - 3..k).map(|j| inc(j) / inc(j - 1)).collect();
            let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &q| (lo.min(q), hi.max(q)));
            if lo > 0.0 && hi <= max_ratio && hi <= 1.25 * lo {
                return LadderDecision::ConvergesWithTail(inc(k - 1) * hi / (1.0 - hi));
            }
        }
        if k >= 3 {
            let (d0, d1, d2) = (inc(k - 3), inc(k - 2), inc(k - 1));
            if d2 > 0.0 && d1 >= self.growth_ratio * d0 && d2 >= self.growth_ratio * d1 {
                return LadderDecision::Diverges(format!(
                    "increments {d0:.4e}, {d1:.4e}, {d2:.4e} do not shrink"
                ));
            }
        }
        LadderDecision::Undecided
    }
}

pub fn default_ladder() -> Vec<f64> {
    (1..=6).map(|k| 10f64.powi(k)).collect()
}

/// Options for [`probe_divergence_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub rule: LadderRule,
    /// Relative accuracy requested for each rung segment.
    pub segment_rel_tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            rule: LadderRule::default(),
            segment_rel_tol: 1e-10,
        }
    }
}

/// Decides convergence of `∫_lo^∞ f` for nonnegative `f` from partial
/// integrals at the truncation points in `ladder`.
pub fn probe_divergence<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    ladder: &[f64],
) -> Result<DivergenceVerdict, QuadError> {
    probe_divergence_with(f, lo, ladder, &ProbeOptions::default())
}

pub fn probe_divergence_with<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    ladder: &[f64],
    options: &ProbeOptions,
) -> Result<DivergenceVerdict, QuadError> {
    let rungs: Vec<f64> = ladder.iter().copied().filter(|r| *r > lo).collect();
    if rungs.windows(2).any(|w| w[1] <= w[0]) {
        return Ok(DivergenceVerdict::inconclusive("ladder is not strictly increasing"));
    }
    // Sign check on a coarse sample; signed integrands must be split by the caller.
    for k in 0..=64 {
        let hi = *rungs.last().unwrap_or(&(lo + 1.0));
        let x = lo + (hi - lo) * (k as f64 / 64.0).powi(3);
        let v = f(x);
        if v < 0.0 {
            return Ok(DivergenceVerdict::inconclusive(format!(
                "integrand is negative ({v:e}) at {x}; probe needs a nonnegative integrand"
            )));
        }
    }
    let mut partials = Vec::new();
    let mut record = Vec::new();
    let mut running = 0.0;
    let mut error = 0.0;
    let mut subdivisions = 0;
    let mut prev = lo;
    for &r in &rungs {
        let abs_tol = options.segment_rel_tol * running;
        let seg = match integrate_tol(&f, prev, r, abs_tol, options.segment_rel_tol) {
            Ok(seg) => seg,
            Err(e) if e.is_positive_overflow() => {
                return Ok(DivergenceVerdict {
                    outcome: Outcome::Diverges,
                    ladder: record,
                    rationale: format!("integrand overflows on [{prev}, {r}]: {e}"),
                })
            }
            Err(e) => return Err(e),
        };
        running += seg.value.max(0.0);
        error += seg.abs_error;
        subdivisions += seg.subdivisions;
        partials.push(running);
        record.push((r, running));
        prev = r;
        match options.rule.decide(&partials) {
            LadderDecision::Converges => {
                let k = partials.len();
                let last_inc = partials[k - 1] - partials[k - 2];
                return Ok(DivergenceVerdict {
                    outcome: Outcome::Converges(IntegralEstimate {
                        value: running,
                        abs_error: error + last_inc,
                        subdivisions,
                    }),
                    ladder: record,
                    rationale: format!("increments plateaued by R = {r:e}"),
                });
            }
            LadderDecision::ConvergesWithTail(tail) => {
                return Ok(DivergenceVerdict {
                    outcome: Outcome::Converges(IntegralEstimate {
                        value: running + tail,
                        abs_error: error + tail,
                        subdivisions,
                    }),
                    ladder: record,
                    rationale: format!("increments decay geometrically by R = {r:e}, tail {tail:.3e}"),
                });
            }
            LadderDecision::Diverges(why) => {
                return Ok(DivergenceVerdict {
                    outcome: Outcome::Diverges,
                    ladder: record,
                    rationale: why,
                })
            }
            LadderDecision::Undecided => {}
        }
    }
    Ok(DivergenceVerdict {
        outcome: Outcome::Inconclusive,
        ladder: record,
        rationale: "ladder exhausted without plateau or sustained growth".into(),
    })
}

/// Applies the ladder rule to a precomputed sequence of `(rung, partial)` pairs,
/// such as partial sums of a positive series.
pub fn assess_partials(points: &[(f64, f64)], rule: &LadderRule) -> DivergenceVerdict {
    let mut partials = Vec::new();
    let mut record = Vec::new();
    for &(r, v) in points {
        partials.push(v);
        record.push((r, v));
        match rule.decide(&partials) {
            LadderDecision::Converges => {
                let k = partials.len();
                return DivergenceVerdict {
                    outcome: Outcome::Converges(IntegralEstimate {
                        value: v,
                        abs_error: partials[k - 1] - partials[k - 2],
                        subdivisions: 0,
                    }),
                    ladder: record,
                    rationale: format!("increments plateaued by n = {r}"),
                };
            }
            LadderDecision::ConvergesWithTail(tail) => {
                return DivergenceVerdict {
                    outcome: Outcome::Converges(IntegralEstimate {
                        value: v + tail,
                        abs_error: tail,
                        subdivisions: 0,
                    }),
                    ladder: record,
                    rationale: format!("increments decay geometrically by n = {r}, tail {tail:.3e}"),
                };
            }
            LadderDecision::Diverges(why) => {
                return DivergenceVerdict {
                    outcome: Outcome::Diverges,
                    ladder: record,
                    rationale: why,
                }
            }
            LadderDecision::Undecided => {}
        }
    }
    DivergenceVerdict {
        outcome: Outcome::Inconclusive,
        ladder: record,
        rationale: "ladder exhausted without plateau or sustained growth".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn linear_is_exact() {
        let r = integrate_adaptive(|x| x, 0.0, 1.0, 1e-12).unwrap();
        assert!((r.value - 0.5).abs() < 1e-12);
        assert!(r.abs_error >= 0.0);
    }

    #[test]
    fn arctan_identity() {
        let r = integrate_adaptive(|x| 4.0 / (1.0 + x * x), 0.0, 1.0, 1e-12).unwrap();
        assert!((r.value - PI).abs() < 1e-10);
    }

    #[test]
    fn quartic_finite_range() {
        let r = integrate_adaptive(|x| x / (1.0 + x.powi(4)), 0.0, 100.0, 1e-10).unwrap();
        assert!((r.value - PI / 4.0).abs() < 1e-4);
        // Tail beyond 100 is at most 5e-5.
        assert!(PI / 4.0 - r.value > 0.0 && PI / 4.0 - r.value < 5e-5);
    }

    #[test]
    fn non_finite_reported() {
        let e = integrate_adaptive(|x| 1.0 / x, -1.0, 1.0, 1e-8).unwrap_err();
        assert!(matches!(e, QuadError::NonFinite { .. }));
    }

    #[test]
    fn probe_linear_diverges() {
        let v = probe_divergence(|u| u, 0.0, &default_ladder()).unwrap();
        assert_eq!(v.outcome, Outcome::Diverges);
    }

    #[test]
    fn probe_quartic_converges() {
        let v = probe_divergence(|u| u / (1.0 + u.powi(4)), 0.0, &default_ladder()).unwrap();
        let value = v.outcome.value().expect("converges");
        assert!((value - PI / 4.0).abs() < 1e-6, "{value}");
    }

    #[test]
    fn probe_harmonic_diverges() {
        let v = probe_divergence(|u| 1.0 / (1.0 + u), 0.0, &default_ladder()).unwrap();
        assert_eq!(v.outcome, Outcome::Diverges);
        // ln(1 + R) at each rung.
        for (r, p) in &v.ladder {
            assert!((p - (1.0 + r).ln()).abs() < 1e-8);
        }
    }

    #[test]
    fn probe_slow_power_is_inconclusive() {
        let v = probe_divergence(|u| (1.0 + u).powf(-1.3), 0.0, &default_ladder()).unwrap();
        assert_eq!(v.outcome, Outcome::Inconclusive);
    }

    #[test]
    fn probe_rejects_negative() {
        let v = probe_divergence(|u| -u, 0.0, &default_ladder()).unwrap();
        assert_eq!(v.outcome, Outcome::Inconclusive);
    }

    #[test]
    fn overflow_counts_as_divergence() {
        let v = probe_divergence(|u| (u * u).exp(), 0.0, &default_ladder()).unwrap();
        assert_eq!(v.outcome, Outcome::Diverges);
    }

    #[test]
    fn anchored_spike() {
        // ∫_y^∞ exp(y² - u²) du for y = 1e4 ≈ 1/(2y).
        let y = 1e4f64;
        let r = integrate_from_anchor(
            |u| (-(u - y) * (u + y)).exp(),
            y,
            PanelRange::RightToInfinity,
            1.0 / (2.0 * y),
            1e-12,
        )
        .unwrap();
        let expected = 1.0 / (2.0 * y) * (1.0 - 1.0 / (2.0 * y * y));
        assert!((r.value - expected).abs() < 1e-12 * expected * 10.0, "{}", r.value);

        let r = integrate_from_anchor(|u| 1.0 / (1.0 + u * u), 0.0, PanelRange::RightToInfinity, 1.0, 1e-12)
            .unwrap();
        assert!((r.value - PI / 2.0).abs() < 1e-9);

        let r = integrate_from_anchor(|u| u, 0.0, PanelRange::RightTo(10.0), 0.01, 1e-12).unwrap();
        assert!((r.value - 50.0).abs() < 1e-10);
    }
}
