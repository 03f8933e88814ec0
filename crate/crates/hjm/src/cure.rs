//! Mixture-cure survival model with a piecewise-constant baseline hazard.
//!
//! The population survival function mixes a cured mass with a susceptible
//! component:
//!
//! `S(t) = pi_c + (1 - pi_c) * S_u(t)`
//!
//! where `pi_c = expit(w1'xi1)` is the probability of being cured and
//! `S_u(t) = exp(-H(t))` is the survival of uncured subjects. Uncured
//! subjects face the hazard
//!
//! `h(t) = h0(t) * exp(w2'xi2 + alpha1 * eta_l(t) + alpha2 * eta_z(t))`
//!
//! with `h0` piecewise constant on segments `(nu_{q-1}, nu_q]` (with
//! `nu_0 = 0`) and the two longitudinal predictors evaluated at time `t`.
//! When covariates are time-fixed, both predictors are affine in `t`
//! (`a + b t`, captured by [`LinPred`]), and the cumulative hazard has the
//! closed per-segment form
//!
//! `H(t) = sum_q h_q * exp(a) * (e^{b t2} - e^{b t1}) / b`
//!
//! over the segment overlaps `(t1, t2]` up to `t`. A series branch handles
//! `|b| < 1e-10`. The full model construction keeps predictors affine by
//! design, so this closed form is always exact here; tests verify it against
//! independent Gauss-Legendre quadrature.

use crate::util::{dot, expit};
use crate::{HjmError, Result};

/// Slope threshold below which the exponential-difference quotient switches
/// to its series expansion.
pub const SLOPE_EPS: f64 = 1e-10;

/// Multiplier applied to the largest observed time when placing the final
/// knot, guaranteeing every observed time lies strictly inside the grid.
pub const KNOT_CUSHION: f64 = 1.01;

/// A linear predictor that is affine in time: `value(t) = a + b t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinPred {
    /// Value at `t = 0` (time-fixed covariates and random intercept).
    pub a: f64,
    /// Slope in `t` (time fixed effect plus random slope, if any).
    pub b: f64,
}

impl LinPred {
    pub fn new(a: f64, b: f64) -> Self {
        LinPred { a, b }
    }

    /// Evaluate the predictor at time `t`.
    #[inline]
    pub fn at(&self, t: f64) -> f64 {
        self.a + self.b * t
    }
}

/// Cure probability `pi_c = expit(w1'xi1)`.
pub fn cure_prob(xi1: &[f64], w1: &[f64]) -> f64 {
    expit(dot(xi1, w1))
}

/// Combined log relative risk of an uncured subject,
/// `G(t) = w2'xi2 + alpha1 * eta_l(t) + alpha2 * eta_z(t)`,
/// again affine in `t`.
pub fn risk_score(
    xi2: &[f64],
    w2: &[f64],
    alpha1: f64,
    alpha2: f64,
    eta_l: LinPred,
    eta_z: LinPred,
) -> LinPred {
    LinPred {
        a: dot(xi2, w2) + alpha1 * eta_l.a + alpha2 * eta_z.a,
        b: alpha1 * eta_l.b + alpha2 * eta_z.b,
    }
}

/// Conditional probability of being cured given survival to the observed
/// time: `pi_c / (pi_c + (1 - pi_c) * s_u)`.
///
/// This single formula serves both the Gibbs update of the latent cure
/// indicator and the posterior cure summaries reported after fitting.
pub fn prob_cured_given_survival(pi_c: f64, s_u: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&pi_c));
    debug_assert!((0.0..=1.0).contains(&s_u));
    let denom = pi_c + (1.0 - pi_c) * s_u;
    if denom <= 0.0 {
        // Both the cured mass and the susceptible survivor mass vanish;
        // survival to t has probability zero either way. Return the cured
        // point mass to keep downstream arithmetic finite.
        return if pi_c > 0.0 { 1.0 } else { 0.0 };
    }
    pi_c / denom
}

/// Check a knot grid: strictly increasing, positive, final knot beyond the
/// largest observed time.
pub fn validate_knots(knots: &[f64], max_obs_time: f64) -> Result<()> {
    if knots.is_empty() {
        return Err(HjmError::InvalidSpec("baseline hazard needs at least one knot".into()));
    }
    let mut prev = 0.0;
    for (q, &k) in knots.iter().enumerate() {
        if !k.is_finite() || k <= prev {
            return Err(HjmError::InvalidSpec(format!(
                "knots must be finite and strictly increasing from 0; knot {} = {k} after {prev}",
                q + 1
            )));
        }
        prev = k;
    }
    let last = *knots.last().expect("non-empty");
    if last <= max_obs_time {
        return Err(HjmError::InvalidSpec(format!(
            "final knot {last} must exceed the largest observed time {max_obs_time}"
        )));
    }
    Ok(())
}

/// Default knot rule: `q` segments with interior knots at the empirical
/// quantiles of the observed event times and the final knot at
/// `KNOT_CUSHION * max_obs_time`. Tied quantiles are merged (reducing the
/// number of segments) with a warning; with no events at all the grid falls
/// back to equal spacing, also with a warning.
pub fn knots_from_quantiles(event_times: &[f64], q: usize, max_obs_time: f64) -> Result<Vec<f64>> {
    if q == 0 {
        return Err(HjmError::InvalidSpec("number of hazard segments must be >= 1".into()));
    }
    if !(max_obs_time > 0.0) {
        return Err(HjmError::InvalidSpec("largest observed time must be positive".into()));
    }
    let last = KNOT_CUSHION * max_obs_time;
    if event_times.is_empty() {
        log::warn!("no observed events; falling back to {q} equally spaced hazard segments");
        return Ok((1..=q).map(|k| last * k as f64 / q as f64).collect());
    }
    let mut sorted = event_times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN event times"));
    let mut knots = Vec::with_capacity(q);
    for k in 1..q {
        let cand = crate::util::quantile_sorted(&sorted, k as f64 / q as f64);
        if cand > *knots.last().unwrap_or(&0.0) && cand < last {
            knots.push(cand);
        }
    }
    if knots.len() + 1 < q {
        log::warn!(
            "tied event-time quantiles reduced the baseline hazard from {q} to {} segments",
            knots.len() + 1
        );
    }
    knots.push(last);
    Ok(knots)
}

/// Index of the hazard segment containing `t`, treating segments as
/// right-closed intervals `(nu_{q-1}, nu_q]` and assigning `t = 0` to the
/// first segment.
pub fn segment_of(t: f64, knots: &[f64]) -> Result<usize> {
    if !(t >= 0.0) {
        return Err(HjmError::Domain(format!("time must be non-negative, got {t}")));
    }
    let last = *knots.last().ok_or_else(|| HjmError::Domain("empty knot grid".into()))?;
    if t > last {
        return Err(HjmError::Domain(format!(
            "time {t} lies beyond the final hazard knot {last}"
        )));
    }
    // partition_point returns the number of knots strictly below t, which is
    // exactly the right-closed segment index.
    Ok(knots.partition_point(|&k| k < t).min(knots.len() - 1))
}

/// `int_{t1}^{t2} e^{b s} ds`, with the flat branch for `|b| < SLOPE_EPS`.
///
/// The sloped branch evaluates the closed form `(e^{b t2} - e^{b t1}) / b`
/// as `e^{b t1} expm1(b (t2 - t1)) / b`, which keeps full precision for
/// arbitrarily small slopes instead of cancelling.
#[inline]
pub(crate) fn seg_exp_integral(b: f64, t1: f64, t2: f64) -> f64 {
    let d = t2 - t1;
    if b.abs() < SLOPE_EPS {
        d + b * (t2 * t2 - t1 * t1) / 2.0
    } else {
        (b * t1).exp() * (b * d).exp_m1() / b
    }
}

/// `int_{t1}^{t2} s e^{b s} ds`, the derivative of [`seg_exp_integral`] with
/// respect to `b`.
///
/// Written as `e^{b t1} (t1 d psi(x) + d^2 phi(x))` with `x = b (t2 - t1)`,
/// `psi(x) = expm1(x)/x` and `phi(x) = (x e^x - expm1(x))/x^2`; `phi` falls
/// back to its series for small `x`, where the direct form cancels.
#[inline]
pub(crate) fn seg_exp_integral_db(b: f64, t1: f64, t2: f64) -> f64 {
    let d = t2 - t1;
    if b.abs() < SLOPE_EPS {
        return (t2 * t2 - t1 * t1) / 2.0 + b * (t2 * t2 * t2 - t1 * t1 * t1) / 3.0;
    }
    let x = b * d;
    let em1 = x.exp_m1();
    let psi = em1 / x;
    let phi = if x.abs() < 1e-3 {
        0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x * (1.0 / 30.0 + x / 144.0)))
    } else {
        (x * (em1 + 1.0) - em1) / (x * x)
    };
    (b * t1).exp() * (t1 * d * psi + d * d * phi)
}

fn check_hazard_values(knots: &[f64], h_star: &[f64]) -> Result<()> {
    if knots.len() != h_star.len() {
        return Err(HjmError::Domain(format!(
            "{} hazard segments but {} hazard values",
            knots.len(),
            h_star.len()
        )));
    }
    if h_star.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
        return Err(HjmError::Domain("baseline hazard values must be positive and finite".into()));
    }
    Ok(())
}

/// Log-hazard of an uncured subject at time `t`:
/// `log h_q + G(t)` where `q` is the segment containing `t` and `G` the
/// combined [`risk_score`].
pub fn log_hazard_uncured(t: f64, knots: &[f64], h_star: &[f64], g: &LinPred) -> Result<f64> {
    check_hazard_values(knots, h_star)?;
    let q = segment_of(t, knots)?;
    Ok(h_star[q].ln() + g.at(t))
}

/// Cumulative hazard of an uncured subject at time `t`, by the closed
/// per-segment form. `t` must not exceed the final knot.
pub fn cum_hazard_uncured(t: f64, knots: &[f64], h_star: &[f64], g: &LinPred) -> Result<f64> {
    check_hazard_values(knots, h_star)?;
    if !(t >= 0.0) {
        return Err(HjmError::Domain(format!("time must be non-negative, got {t}")));
    }
    let last = *knots.last().expect("validated non-empty");
    if t > last {
        return Err(HjmError::Domain(format!(
            "time {t} lies beyond the final hazard knot {last}"
        )));
    }
    let ea = g.a.exp();
    let mut total = 0.0;
    let mut lo = 0.0;
    for (q, &hi) in knots.iter().enumerate() {
        let upper = hi.min(t);
        if upper <= lo {
            break;
        }
        total += h_star[q] * ea * seg_exp_integral(g.b, lo, upper);
        lo = hi;
    }
    Ok(total)
}

/// Survival of an uncured subject, `exp(-H(t))`.
pub fn surv_uncured(t: f64, knots: &[f64], h_star: &[f64], g: &LinPred) -> Result<f64> {
    Ok((-cum_hazard_uncured(t, knots, h_star, g)?).exp())
}

/// Cumulative hazard at any nonnegative time: inside the knot grid this is
/// [`cum_hazard_uncured`]; beyond the final knot the last segment's hazard
/// level is carried forward. Risk predictions may look past the largest
/// fitted time, where the fitted step function is silent, and a constant
/// continuation is the natural reading of its last level.
pub fn cum_hazard_extended(t: f64, knots: &[f64], h_star: &[f64], g: &LinPred) -> Result<f64> {
    check_hazard_values(knots, h_star)?;
    if !(t >= 0.0) {
        return Err(HjmError::Domain(format!("time must be non-negative, got {t}")));
    }
    let last = *knots.last().expect("validated non-empty");
    if t <= last {
        return cum_hazard_uncured(t, knots, h_star, g);
    }
    let inside = cum_hazard_uncured(last, knots, h_star, g)?;
    let tail = h_star.last().expect("validated non-empty")
        * g.a.exp()
        * seg_exp_integral(g.b, last, t);
    Ok(inside + tail)
}

/// Survival of an uncured subject under the carried-forward hazard,
/// `exp(-H(t))` with `H` from [`cum_hazard_extended`].
pub fn surv_uncured_extended(t: f64, knots: &[f64], h_star: &[f64], g: &LinPred) -> Result<f64> {
    Ok((-cum_hazard_extended(t, knots, h_star, g)?).exp())
}

/// Population survival `pi_c + (1 - pi_c) * s_u`, mixing the cured point
/// mass with the susceptible survivor function.
pub fn surv_population(pi_c: f64, s_u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&pi_c) {
        return Err(HjmError::Domain(format!("cure probability {pi_c} outside [0,1]")));
    }
    if !(0.0..=1.0).contains(&s_u) {
        return Err(HjmError::Domain(format!("susceptible survival {s_u} outside [0,1]")));
    }
    Ok(pi_c + (1.0 - pi_c) * s_u)
}
