//! Hurdle model for zero-inflated longitudinal counts.
//!
//! A count `Y` follows a hurdle distribution with structural-zero probability
//! `pi_z` and a zero-truncated count component for positive values:
//!
//! * `P(Y = 0) = pi_z`
//! * `P(Y = y) = (1 - pi_z) * P_trunc(y)` for `y >= 1`
//!
//! The truncated component is either a zero-truncated Poisson (ZTP) with rate
//! `lambda`, or a zero-truncated negative binomial (ZTNB) with mean `lambda`
//! and dispersion `r`. The ZTNB is parameterized through
//! `kappa = r / (r + lambda)`, so its untruncated zero mass is `kappa^r` and
//! the truncation denominator is `1 - kappa^r`. As `r -> inf` the ZTNB
//! converges to the ZTP.
//!
//! Both linear predictors are mixed-effects regressions:
//! `eta_l = x1'beta1 + z1'u` drives `log lambda` and
//! `eta_z = x2'beta2 + z2'b` drives `logit pi_z`.
//!
//! # Numerical notes
//!
//! All probability computations stay in log space. Truncation denominators
//! use `expm1`/`log1p` so tiny rates (`lambda ~ 1e-8`) and near-Poisson
//! dispersions (`r ~ 1e8`) stay accurate. Before exponentiation, `eta_l` is
//! clamped to [`ETA_L_CLAMP_MIN`], [`ETA_L_CLAMP_MAX`]; every clamp event is
//! counted in a process-wide diagnostic counter (see [`clamp_events`]).

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::util::{dot, log_expit, ln_gamma};
use crate::{HjmError, Result};

/// Lower clamp for the log-rate predictor before exponentiation.
pub const ETA_L_CLAMP_MIN: f64 = -30.0;
/// Upper clamp for the log-rate predictor before exponentiation.
pub const ETA_L_CLAMP_MAX: f64 = 30.0;

/// Count family of the positive (zero-truncated) hurdle component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Zero-truncated Poisson.
    Zip,
    /// Zero-truncated negative binomial.
    Zinb,
}

impl Family {
    /// Human-readable lowercase name, matching configuration files.
    pub fn name(&self) -> &'static str {
        match self {
            Family::Zip => "zip",
            Family::Zinb => "zinb",
        }
    }
}

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of times `eta_l` has been clamped since process start (or the last
/// [`reset_clamp_events`]). A persistently growing counter during sampling
/// signals that the chain is visiting extreme predictor values.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// Reset the clamp diagnostic counter to zero.
pub fn reset_clamp_events() {
    CLAMP_EVENTS.store(0, Ordering::Relaxed);
}

#[inline]
pub(crate) fn clamp_eta_l(eta_l: f64) -> (f64, bool) {
    if eta_l < ETA_L_CLAMP_MIN {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        (ETA_L_CLAMP_MIN, true)
    } else if eta_l > ETA_L_CLAMP_MAX {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        (ETA_L_CLAMP_MAX, true)
    } else {
        (eta_l, false)
    }
}

/// Log-rate linear predictor `x1'beta1 + z1'u` for one measurement row.
pub fn eta_lambda(beta1: &[f64], x1: &[f64], u: &[f64], z1: &[f64]) -> f64 {
    dot(beta1, x1) + dot(u, z1)
}

/// Structural-zero linear predictor `x2'beta2 + z2'b` for one measurement row.
pub fn eta_zero(beta2: &[f64], x2: &[f64], b: &[f64], z2: &[f64]) -> f64 {
    dot(beta2, x2) + dot(b, z2)
}

/// `ln Gamma(y + r) - ln Gamma(r)` for integer `y >= 0`.
///
/// Uses the exact product form `sum_k ln(r + k)` when it is cheap or when `r`
/// is so large that the difference of two huge `ln Gamma` values would lose
/// precision; otherwise falls back to the direct difference.
fn ln_rising_factorial(r: f64, y: u32) -> f64 {
    if y == 0 {
        return 0.0;
    }
    if y <= 64 || r >= 1e6 {
        let mut s = 0.0;
        for k in 0..y {
            s += (r + k as f64).ln();
        }
        s
    } else {
        ln_gamma(y as f64 + r) - ln_gamma(r)
    }
}

/// Log-PMF of the zero-truncated Poisson at count `y >= 1` with rate
/// `lambda > 0`:
///
/// `log [ e^{-lambda} lambda^y / y! ] - log(1 - e^{-lambda})`
///
/// The truncation denominator is computed as `-expm1(-lambda)`, so rates as
/// small as `1e-8` give finite, accurate results.
pub fn log_pmf_ztp(y: u32, lambda: f64) -> Result<f64> {
    if y == 0 {
        return Err(HjmError::Domain("zero-truncated PMF requires y >= 1".into()));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(HjmError::Domain(format!("ZTP rate must be positive and finite, got {lambda}")));
    }
    let yf = y as f64;
    Ok(-lambda + yf * lambda.ln() - ln_gamma(yf + 1.0) - (-(-lambda).exp_m1()).ln())
}

/// Log-PMF of the zero-truncated negative binomial at count `y >= 1` with
/// mean `lambda > 0` and dispersion `r > 0`.
///
/// In terms of `kappa = r / (r + lambda)`:
///
/// `log [ Gamma(y+r) / (y! Gamma(r)) kappa^r (1-kappa)^y ] - log(1 - kappa^r)`
///
/// `log kappa` is computed as `-log1p(lambda / r)` and the truncation
/// denominator as `-expm1(r log kappa)`, which keeps the near-Poisson regime
/// (`r ~ 1e8`) accurate to better than `1e-6` in the log-PMF.
pub fn log_pmf_ztnb(y: u32, lambda: f64, r: f64) -> Result<f64> {
    if y == 0 {
        return Err(HjmError::Domain("zero-truncated PMF requires y >= 1".into()));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(HjmError::Domain(format!("ZTNB mean must be positive and finite, got {lambda}")));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(HjmError::Domain(format!("ZTNB dispersion must be positive and finite, got {r}")));
    }
    let yf = y as f64;
    let log_kappa = -(lambda / r).ln_1p();
    let log_1m_kappa = lambda.ln() - (r + lambda).ln();
    let m = r * log_kappa; // log kappa^r, always negative
    let log_denom = (-m.exp_m1()).ln();
    Ok(ln_rising_factorial(r, y) - ln_gamma(yf + 1.0) + m + yf * log_1m_kappa - log_denom)
}

/// Hurdle log-PMF for one measurement row.
///
/// * `y == 0` contributes `log pi_z = log expit(eta_z)`;
/// * `y >= 1` contributes `log(1 - pi_z)` plus the zero-truncated log-PMF of
///   the selected [`Family`] with rate `lambda = exp(eta_l)`.
///
/// `eta_l` is clamped to `[-30, 30]` before exponentiation (with the clamp
/// counted, see [`clamp_events`]). `r` is required for [`Family::Zinb`] and
/// ignored for [`Family::Zip`].
pub fn log_hurdle_pmf(y: u32, eta_l: f64, eta_z: f64, family: Family, r: Option<f64>) -> Result<f64> {
    if y == 0 {
        return Ok(log_expit(eta_z));
    }
    let (eta_lc, _) = clamp_eta_l(eta_l);
    let lambda = eta_lc.exp();
    let trunc = match family {
        Family::Zip => log_pmf_ztp(y, lambda)?,
        Family::Zinb => {
            let r = r.ok_or_else(|| {
                HjmError::Domain("ZTNB hurdle requires a dispersion parameter r".into())
            })?;
            log_pmf_ztnb(y, lambda, r)?
        }
    };
    Ok(log_expit(-eta_z) + trunc)
}

/// Longitudinal log-likelihood of one subject: the sum of hurdle log-PMFs
/// over that subject's rows, given precomputed linear predictors. An empty
/// row set contributes exactly zero.
pub fn subject_long_loglik(
    ys: &[u32],
    etas_l: &[f64],
    etas_z: &[f64],
    family: Family,
    r: Option<f64>,
) -> Result<f64> {
    if ys.len() != etas_l.len() || ys.len() != etas_z.len() {
        return Err(HjmError::Domain("subject_long_loglik: mismatched row slices".into()));
    }
    let mut total = 0.0;
    for i in 0..ys.len() {
        total += log_hurdle_pmf(ys[i], etas_l[i], etas_z[i], family, r)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Fused row evaluation for the posterior gradient.
//
// The sampler evaluates the same log-PMFs thousands of times per second, so
// per-dispersion lookup tables replace repeated `ln Gamma` calls and every
// row returns its partial derivatives alongside the log-likelihood.
// ---------------------------------------------------------------------------

/// Per-dispersion tables: `lr[y] = ln Gamma(y+r) - ln Gamma(r)` and
/// `dig[y] = digamma(y+r) - digamma(r)`, exact by telescoping.
pub(crate) struct NbTables {
    lr: Vec<f64>,
    dig: Vec<f64>,
}

impl NbTables {
    pub(crate) fn new(r: f64, y_max: u32) -> Self {
        let n = y_max as usize + 1;
        let mut lr = vec![0.0; n];
        let mut dig = vec![0.0; n];
        for y in 1..n {
            let base = r + (y - 1) as f64;
            lr[y] = lr[y - 1] + base.ln();
            dig[y] = dig[y - 1] + 1.0 / base;
        }
        NbTables { lr, dig }
    }
}

/// Log-likelihood and partial derivatives of one hurdle row.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct RowEval {
    pub ll: f64,
    /// d ll / d eta_l (zero whenever the clamp is active).
    pub d_eta_l: f64,
    /// d ll / d eta_z.
    pub d_eta_z: f64,
    /// d ll / d r (zero for the Poisson family).
    pub d_r: f64,
}

/// Evaluate one row under the ZIP hurdle. `lg_fact` is `ln Gamma(y+1)`,
/// precomputed by the caller.
#[inline]
pub(crate) fn row_zip(y: u32, lg_fact: f64, eta_l: f64, eta_z: f64) -> RowEval {
    if y == 0 {
        return RowEval {
            ll: log_expit(eta_z),
            d_eta_l: 0.0,
            d_eta_z: crate::util::expit(-eta_z),
            d_r: 0.0,
        };
    }
    let (eta_lc, clamped) = clamp_eta_l(eta_l);
    let lambda = eta_lc.exp();
    let yf = y as f64;
    let em1 = lambda.exp_m1(); // e^lambda - 1 > 0; +inf for huge lambda is fine
    let ll = log_expit(-eta_z) - lambda + yf * eta_lc - lg_fact - (em1.ln() - lambda);
    // log(1 - e^-lambda) = log(expm1(lambda)) - lambda, stable at both ends.
    let d_eta_l = if clamped { 0.0 } else { yf - lambda - lambda / em1 };
    RowEval { ll, d_eta_l, d_eta_z: -crate::util::expit(eta_z), d_r: 0.0 }
}

/// Evaluate one row under the ZTNB hurdle. `ln_r` is `ln r`; `tab` must have
/// been built for the same `r` with `y_max >= y`.
#[inline]
pub(crate) fn row_ztnb(
    y: u32,
    lg_fact: f64,
    eta_l: f64,
    eta_z: f64,
    r: f64,
    ln_r: f64,
    tab: &NbTables,
) -> RowEval {
    if y == 0 {
        return RowEval {
            ll: log_expit(eta_z),
            d_eta_l: 0.0,
            d_eta_z: crate::util::expit(-eta_z),
            d_r: 0.0,
        };
    }
    let (eta_lc, clamped) = clamp_eta_l(eta_l);
    let lambda = eta_lc.exp();
    let yf = y as f64;
    let ln_r_lambda = (r + lambda).ln();
    let log_kappa = ln_r - ln_r_lambda;
    let log_1m_kappa = eta_lc - ln_r_lambda;
    let m = r * log_kappa;
    let em1 = m.exp_m1(); // in (-1, 0)
    let log_denom = (-em1).ln();
    let ll = log_expit(-eta_z) + tab.lr[y as usize] - lg_fact + m + yf * log_1m_kappa - log_denom;

    // g = kappa^r / (1 - kappa^r)
    let g = -(1.0 + em1) / em1;
    let frac = lambda / (r + lambda);
    let d_eta_l = if clamped { 0.0 } else { yf - frac * (r + yf + g * r) };
    let d_r = tab.dig[y as usize] + (1.0 + g) * (log_kappa + frac) - yf / (r + lambda);
    RowEval { ll, d_eta_l, d_eta_z: -crate::util::expit(eta_z), d_r }
}
