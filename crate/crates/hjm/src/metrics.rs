//! Predictive-accuracy metrics, estimation-quality summaries, and
//! model-comparison scores.
//!
//! Three groups of tools live here.
//!
//! * **Time-dependent discrimination and calibration.** [`auc_ts`] and
//!   [`brier_ts`] score window risks for `(s, s+t]` against validation
//!   survival data. Censoring is handled by inverse-probability-of-
//!   censoring weighting (IPCW) with Kaplan–Meier weights for the
//!   censoring distribution, each weight evaluated at
//!   `min(observed time, s+t)`. [`integrated_metrics`] collapses a panel
//!   of landmark values into `iAUC`/`iBS` using weights proportional to
//!   `2 f(s) S(s)` built from Kaplan–Meier increments of the event-time
//!   distribution.
//! * **Estimation quality over replicated fits.** [`estimation_summary`]
//!   reduces replicated interval estimates against the generating truth
//!   to relative bias, root-mean-square error, and coverage rate.
//! * **Model comparison.** [`waic`] uses the subject-level conditional
//!   log-likelihood (random effects conditioned on, susceptibility
//!   indicator summed out in closed form), [`bic`] evaluates the same
//!   likelihood at posterior means, and [`paired_bootstrap`] attaches
//!   resampling p-values to accuracy differences between two models.
//!
//! Undefined values (a window without cases, a Brier denominator of
//! zero) are reported as `None`, never silently replaced: downstream
//! writers print them as `NA`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::posterior::{ParamVector, Posterior};
use crate::sampler::PosteriorDraws;
use crate::util::{log_sum_exp, mean, stream_rng, streams, variance, Matrix};
use crate::{HjmError, Result};

// -- Kaplan–Meier -----------------------------------------------------------

/// Product-limit estimate of a survival-type function, used both for the
/// event-time distribution and (with the censoring indicator flipped) for
/// the censoring distribution that drives the IPCW weights.
///
/// Ties share one risk set: every subject with an observed time `>= t`
/// counts as at risk at `t`, whichever kind of jump it later contributes.
#[derive(Debug, Clone)]
pub struct KaplanMeier {
    /// Distinct jump times, increasing.
    times: Vec<f64>,
    /// Survival value immediately after the corresponding jump.
    surv: Vec<f64>,
}

impl KaplanMeier {
    /// Fits the product-limit curve for the jumps marked `true`.
    pub fn fit(times: &[f64], jumps: &[bool]) -> Result<KaplanMeier> {
        if times.len() != jumps.len() {
            return Err(HjmError::Domain(format!(
                "{} observation times but {} jump marks",
                times.len(),
                jumps.len()
            )));
        }
        if let Some(bad) = times.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(HjmError::Domain(format!("observation time {bad} outside [0, inf)")));
        }
        let mut jump_times: Vec<f64> =
            times.iter().zip(jumps).filter(|(_, &j)| j).map(|(&t, _)| t).collect();
        jump_times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        jump_times.dedup();

        let mut surv = Vec::with_capacity(jump_times.len());
        let mut s = 1.0;
        for &tj in &jump_times {
            let at_risk = times.iter().filter(|&&t| t >= tj).count() as f64;
            let d = times.iter().zip(jumps).filter(|(&t, &j)| j && t == tj).count() as f64;
            s *= 1.0 - d / at_risk;
            surv.push(s);
        }
        Ok(KaplanMeier { times: jump_times, surv })
    }

    /// Curve for the event-time distribution `S(t) = P(T > t)`.
    pub fn event(times: &[f64], events: &[u8]) -> Result<KaplanMeier> {
        let jumps: Vec<bool> = events.iter().map(|&e| e == 1).collect();
        KaplanMeier::fit(times, &jumps)
    }

    /// Curve for the censoring distribution `G(t) = P(C > t)`.
    pub fn censoring(times: &[f64], events: &[u8]) -> Result<KaplanMeier> {
        let jumps: Vec<bool> = events.iter().map(|&e| e == 0).collect();
        KaplanMeier::fit(times, &jumps)
    }

    /// Right-continuous value at `t`.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&tj| tj <= t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }
}

// -- windowed case/control decomposition ------------------------------------

/// Status of one subject for the prediction window `(s, s+t]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WindowStatus {
    /// Event observed inside the window.
    Case,
    /// Known event-free past the window end.
    Control,
    /// Censored inside the window: outcome unknown, weight zero.
    Indeterminate,
    /// Not under observation past the landmark.
    NotAtRisk,
}

fn window_status(time: f64, event: u8, s: f64, t: f64) -> WindowStatus {
    if time <= s {
        WindowStatus::NotAtRisk
    } else if event == 1 && time <= s + t {
        WindowStatus::Case
    } else if time > s + t || (event == 0 && time >= s + t) {
        // A subject censored exactly at the window end is known to have
        // survived it: right censoring leaves the event time strictly
        // beyond the censoring time.
        WindowStatus::Control
    } else {
        WindowStatus::Indeterminate
    }
}

/// One determinate at-risk subject: window outcome, IPCW weight, risk.
struct WindowObs {
    d: f64,
    w: f64,
    risk: f64,
}

fn window_obs(
    risks: &[f64],
    times: &[f64],
    events: &[u8],
    s: f64,
    t: f64,
    g: &KaplanMeier,
) -> Vec<WindowObs> {
    let mut out = Vec::new();
    for i in 0..times.len() {
        let d = match window_status(times[i], events[i], s, t) {
            WindowStatus::Case => 1.0,
            WindowStatus::Control => 0.0,
            _ => continue,
        };
        let gv = g.at(times[i].min(s + t));
        if gv > 0.0 {
            out.push(WindowObs { d, w: 1.0 / gv, risk: risks[i] });
        }
    }
    out
}

fn validate_window_inputs(
    risks: &[f64],
    times: &[f64],
    events: &[u8],
    s: f64,
    t: f64,
) -> Result<()> {
    if risks.len() != times.len() || events.len() != times.len() {
        return Err(HjmError::Domain(format!(
            "{} risks, {} times, {} event marks",
            risks.len(),
            times.len(),
            events.len()
        )));
    }
    if times.is_empty() {
        return Err(HjmError::Domain("empty validation set".into()));
    }
    if let Some(bad) = risks.iter().find(|r| !r.is_finite()) {
        return Err(HjmError::Domain(format!("non-finite risk {bad}")));
    }
    if events.iter().any(|&e| e > 1) {
        return Err(HjmError::Domain("event marks must be 0 or 1".into()));
    }
    if !(s.is_finite() && s >= 0.0) {
        return Err(HjmError::Domain(format!("landmark {s} outside [0, inf)")));
    }
    if !(t.is_finite() && t > 0.0) {
        return Err(HjmError::Domain(format!("window {t} outside (0, inf)")));
    }
    Ok(())
}

/// Which windowed accuracy metric a row or bootstrap refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccuracyMetric {
    Auc,
    Bs,
}

impl AccuracyMetric {
    /// Column label used in the metric CSV files.
    pub fn label(self) -> &'static str {
        match self {
            AccuracyMetric::Auc => "auc",
            AccuracyMetric::Bs => "bs",
        }
    }
}

/// Unvalidated metric evaluation shared by the public entry points and
/// the bootstrap loop. `None` marks an undefined value.
fn metric_on(
    metric: AccuracyMetric,
    risks: &[f64],
    times: &[f64],
    events: &[u8],
    s: f64,
    t: f64,
) -> Option<f64> {
    let g = KaplanMeier::censoring(times, events).ok()?;
    let obs = window_obs(risks, times, events, s, t, &g);
    match metric {
        AccuracyMetric::Auc => {
            let cases: Vec<&WindowObs> = obs.iter().filter(|o| o.d == 1.0).collect();
            let controls: Vec<&WindowObs> = obs.iter().filter(|o| o.d == 0.0).collect();
            if cases.is_empty() || controls.is_empty() {
                return None;
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for ca in &cases {
                for co in &controls {
                    let w = ca.w * co.w;
                    den += w;
                    if ca.risk > co.risk {
                        num += w;
                    } else if ca.risk == co.risk {
                        num += 0.5 * w;
                    }
                }
            }
            Some(num / den)
        }
        AccuracyMetric::Bs => {
            let wsum: f64 = obs.iter().map(|o| o.w).sum();
            if wsum <= 0.0 {
                return None;
            }
            let err: f64 = obs.iter().map(|o| o.w * (o.d - o.risk) * (o.d - o.risk)).sum();
            Some(err / wsum)
        }
    }
}

/// IPCW area under the time-dependent ROC curve for the window `(s, s+t]`.
///
/// A *case* experiences the event inside the window; a *control* is known
/// event-free past its end. Each pair is weighted by the product of the
/// members' censoring weights and ties in risk count one half. `None`
/// flags a window with no cases or no controls.
pub fn auc_ts(risks: &[f64], times: &[f64], events: &[u8], s: f64, t: f64) -> Result<Option<f64>> {
    validate_window_inputs(risks, times, events, s, t)?;
    Ok(metric_on(AccuracyMetric::Auc, risks, times, events, s, t))
}

/// IPCW Brier score for the window `(s, s+t]`: the weighted mean squared
/// difference between the window outcome and the predicted risk. `None`
/// flags a window with no determinate at-risk subject.
pub fn brier_ts(risks: &[f64], times: &[f64], events: &[u8], s: f64, t: f64) -> Result<Option<f64>> {
    validate_window_inputs(risks, times, events, s, t)?;
    Ok(metric_on(AccuracyMetric::Bs, risks, times, events, s, t))
}

// -- integrated metrics -----------------------------------------------------

/// Normalized landmark weights `w(s) ∝ 2 f(s) S(s)` with `f` and `S` read
/// off a Kaplan–Meier curve of the event-time distribution.
///
/// The landmark axis is cut at midpoints (a trapezoid partition of the
/// grid range); the density mass of a cell is the Kaplan–Meier survival
/// drop across it, so cell widths cancel after normalization. When the
/// curve is degenerate over the grid (no event mass at all) the weights
/// fall back to equal, and the second return marks that fallback.
pub fn landmark_weights(landmarks: &[f64], km_event: &KaplanMeier) -> Result<(Vec<f64>, bool)> {
    let l = landmarks.len();
    if l < 2 {
        return Err(HjmError::Domain(format!("{l} landmarks, need at least 2 to integrate")));
    }
    for w in landmarks.windows(2) {
        if !(w[0].is_finite() && w[1].is_finite() && w[0] < w[1]) {
            return Err(HjmError::Domain("landmarks must be finite and strictly increasing".into()));
        }
    }
    if landmarks[0] < 0.0 {
        return Err(HjmError::Domain(format!("landmark {} outside [0, inf)", landmarks[0])));
    }
    let mut bounds = Vec::with_capacity(l + 1);
    bounds.push(landmarks[0]);
    for w in landmarks.windows(2) {
        bounds.push(0.5 * (w[0] + w[1]));
    }
    bounds.push(landmarks[l - 1]);

    let mut raw: Vec<f64> = (0..l)
        .map(|k| {
            let mass = km_event.at(bounds[k]) - km_event.at(bounds[k + 1]);
            2.0 * mass * km_event.at(landmarks[k])
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let fallback = total <= 0.0;
    if fallback {
        raw = vec![1.0 / l as f64; l];
    } else {
        raw.iter_mut().for_each(|w| *w /= total);
    }
    Ok((raw, fallback))
}

/// Integrated accuracy over a landmark grid plus the weight-fallback flag.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratedMetrics {
    pub iauc: Option<f64>,
    pub ibs: Option<f64>,
    /// Landmark weights degenerated to equal weighting (no event mass).
    pub equal_weights: bool,
}

/// Discrete approximations of the integrated AUC and Brier score:
/// weighted sums of the landmark panel with [`landmark_weights`].
/// Undefined panel cells are skipped and the remaining weights
/// renormalized; an all-undefined panel yields `None`.
pub fn integrated_metrics(
    landmarks: &[f64],
    aucs: &[Option<f64>],
    bss: &[Option<f64>],
    km_event: &KaplanMeier,
) -> Result<IntegratedMetrics> {
    if aucs.len() != landmarks.len() || bss.len() != landmarks.len() {
        return Err(HjmError::Domain(format!(
            "{} landmarks with {} AUC and {} Brier cells",
            landmarks.len(),
            aucs.len(),
            bss.len()
        )));
    }
    let (weights, equal_weights) = landmark_weights(landmarks, km_event)?;
    let combine = |vals: &[Option<f64>]| -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (v, w) in vals.iter().zip(&weights) {
            if let Some(v) = v {
                num += v * w;
                den += w;
            }
        }
        (den > 0.0).then(|| num / den)
    };
    Ok(IntegratedMetrics { iauc: combine(aucs), ibs: combine(bss), equal_weights })
}

// -- estimation quality over replications -----------------------------------

/// Replication summary of one parameter against its generating value.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationRow {
    pub name: String,
    pub truth: f64,
    /// Mean point estimate over replications.
    pub est: f64,
    /// Standard deviation of the point estimates over replications.
    pub sd: f64,
    /// Relative bias `(est − truth) / truth`, or the absolute bias
    /// `est − truth` when the truth is zero (see `rb_is_absolute`).
    pub rb: f64,
    pub rmse: f64,
    /// Coverage rate of the 95% intervals, in percent.
    pub cr: f64,
    /// The truth is zero, so `rb` holds an absolute rather than relative
    /// bias.
    pub rb_is_absolute: bool,
}

/// Reduces replicated fits to relative bias, RMSE, and coverage.
///
/// `est`, `lo`, and `hi` hold one row per replication and one column per
/// parameter: the point estimate and the bounds of the 95% credible
/// interval. Coverage is the percentage of replications whose interval
/// contains the truth.
pub fn estimation_summary(
    names: &[String],
    truth: &[f64],
    est: &Matrix,
    lo: &Matrix,
    hi: &Matrix,
) -> Result<Vec<EstimationRow>> {
    let p = names.len();
    if truth.len() != p {
        return Err(HjmError::Domain(format!("{} names but {} true values", p, truth.len())));
    }
    for (label, m) in [("estimate", est), ("lower", lo), ("upper", hi)] {
        if m.cols != p || m.rows != est.rows {
            return Err(HjmError::Domain(format!(
                "{label} matrix is {}x{}, expected {}x{}",
                m.rows, m.cols, est.rows, p
            )));
        }
    }
    if est.rows == 0 {
        return Err(HjmError::Domain("no replications".into()));
    }
    let reps = est.rows;
    let out = (0..p)
        .map(|j| {
            let col = est.col(j);
            let m = mean(&col);
            let sd = variance(&col).sqrt();
            let rb_is_absolute = truth[j] == 0.0;
            let rb = if rb_is_absolute { m - truth[j] } else { (m - truth[j]) / truth[j] };
            let rmse =
                (col.iter().map(|e| (e - truth[j]) * (e - truth[j])).sum::<f64>() / reps as f64)
                    .sqrt();
            let covered = (0..reps)
                .filter(|&r| lo.get(r, j) <= truth[j] && truth[j] <= hi.get(r, j))
                .count();
            let cr = 100.0 * covered as f64 / reps as f64;
            EstimationRow { name: names[j].clone(), truth: truth[j], est: m, sd, rb, rmse, cr, rb_is_absolute }
        })
        .collect();
    Ok(out)
}

// -- WAIC / BIC -------------------------------------------------------------

/// Widely applicable information criterion on the deviance scale,
/// together with its two ingredients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaicResult {
    /// `-2 (lppd − p_waic)`; smaller is better.
    pub waic: f64,
    /// Log pointwise predictive density summed over subjects.
    pub lppd: f64,
    /// Effective parameter count: summed per-subject variance of the
    /// log-likelihood over draws.
    pub p_waic: f64,
}

/// WAIC from a pointwise log-likelihood matrix (rows = draws, columns =
/// subjects). Fails below two draws, where the variance penalty is
/// undefined.
pub fn waic_from_loglik(ll: &Matrix) -> Result<WaicResult> {
    if ll.rows < 2 {
        return Err(HjmError::Domain(format!(
            "{} draws; the WAIC variance penalty needs at least 2",
            ll.rows
        )));
    }
    let ln_m = (ll.rows as f64).ln();
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    for j in 0..ll.cols {
        let col = ll.col(j);
        lppd += log_sum_exp(&col) - ln_m;
        p_waic += variance(&col);
    }
    Ok(WaicResult { waic: -2.0 * (lppd - p_waic), lppd, p_waic })
}

/// Builds the pointwise matrix for [`waic_from_loglik`] from unconstrained
/// parameter draws: one subject-level conditional log-likelihood per draw
/// and subject, susceptibility summed out.
pub fn waic_from_rows(post: &Posterior, rows: &Matrix) -> Result<WaicResult> {
    let lls: Vec<Vec<f64>> = (0..rows.rows)
        .into_par_iter()
        .map(|k| {
            let (theta, u, b) = post.from_unconstrained(rows.row(k));
            post.subject_logliks_marginal(&theta, &u, &b)
        })
        .collect::<Result<_>>()?;
    let ll = Matrix::from_fn(rows.rows, post.n_subjects(), |r, c| lls[r][c]);
    waic_from_loglik(&ll)
}

/// WAIC over all kept draws of a sampler run.
pub fn waic(post: &Posterior, draws: &PosteriorDraws) -> Result<WaicResult> {
    waic_from_rows(post, &pooled_unconstrained(draws))
}

/// Bayesian information criterion `-2 log L + k log n`.
///
/// The likelihood is the same subject-level conditional likelihood as in
/// [`waic`], evaluated at the posterior means of the constrained
/// parameters and of the per-subject effects; `k` counts the free model
/// parameters (not the latents) and `n` the subjects.
pub fn bic_from_rows(post: &Posterior, rows: &Matrix) -> Result<f64> {
    if rows.rows == 0 {
        return Err(HjmError::Domain("no draws".into()));
    }
    let n = post.n_subjects();
    if n == 0 {
        return Err(HjmError::Domain("no subjects".into()));
    }
    let layout = post.layout();
    let m = rows.rows as f64;
    let mut flat_mean = vec![0.0; layout.fixed_len()];
    let mut u_mean = Matrix::zeros(n, 0);
    let mut b_mean = Matrix::zeros(n, 0);
    for k in 0..rows.rows {
        let (theta, u, b) = post.from_unconstrained(rows.row(k));
        if k == 0 {
            u_mean = Matrix::zeros(u.rows, u.cols);
            b_mean = Matrix::zeros(b.rows, b.cols);
        }
        for (acc, v) in flat_mean.iter_mut().zip(theta.flatten(layout)) {
            *acc += v / m;
        }
        for i in 0..n {
            for (acc, v) in u_mean.row_mut(i).iter_mut().zip(u.row(i)) {
                *acc += v / m;
            }
            for (acc, v) in b_mean.row_mut(i).iter_mut().zip(b.row(i)) {
                *acc += v / m;
            }
        }
    }
    let theta_bar = ParamVector::from_flat(layout, &flat_mean);
    let ll: f64 = post.subject_logliks_marginal(&theta_bar, &u_mean, &b_mean)?.iter().sum();
    Ok(-2.0 * ll + layout.fixed_len() as f64 * (n as f64).ln())
}

/// BIC over all kept draws of a sampler run.
pub fn bic(post: &Posterior, draws: &PosteriorDraws) -> Result<f64> {
    bic_from_rows(post, &pooled_unconstrained(draws))
}

/// Stacks the kept unconstrained draws of all chains into one matrix.
pub fn pooled_unconstrained(draws: &PosteriorDraws) -> Matrix {
    let rows: usize = draws.chains.iter().map(|c| c.unconstrained.rows).sum();
    let cols = draws.chains.first().map_or(0, |c| c.unconstrained.cols);
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for c in &draws.chains {
        for k in 0..c.unconstrained.rows {
            out.row_mut(r).copy_from_slice(c.unconstrained.row(k));
            r += 1;
        }
    }
    out
}

// -- paired bootstrap -------------------------------------------------------

/// Outcome of a paired-bootstrap comparison of one accuracy metric
/// between two models on the same validation subjects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedBootstrap {
    pub estimate_a: f64,
    pub estimate_b: f64,
    /// Bootstrap standard deviations of the per-model metric.
    pub sd_a: f64,
    pub sd_b: f64,
    /// Observed difference `a − b`.
    pub diff: f64,
    /// Two-sided resampling p-value for the difference, with the usual
    /// `+1` finite-sample correction.
    pub p_value: f64,
    /// Resamples on which both models' metrics were defined.
    pub resamples_used: usize,
}

/// Deterministic subject resamples shared by every bootstrap on the same
/// validation set: they depend only on `(n, resamples, seed)`, so
/// separate calls stay paired.
fn resample_indices(n: usize, resamples: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = stream_rng(seed, streams::BOOTSTRAP);
    (0..resamples)
        .map(|_| (0..n).map(|_| rng.gen_range(0..n as u32)).collect())
        .collect()
}

/// Metric replicates per model over the given resamples.
fn bootstrap_replicates(
    metric: AccuracyMetric,
    models: &[&[f64]],
    times: &[f64],
    events: &[u8],
    s: f64,
    t: f64,
    idx: &[Vec<u32>],
) -> Vec<Vec<Option<f64>>> {
    idx.par_iter()
        .map(|ix| {
            let rt: Vec<f64> = ix.iter().map(|&i| times[i as usize]).collect();
            let re: Vec<u8> = ix.iter().map(|&i| events[i as usize]).collect();
            models
                .iter()
                .map(|risks| {
                    let rr: Vec<f64> = ix.iter().map(|&i| risks[i as usize]).collect();
                    metric_on(metric, &rr, &rt, &re, s, t)
                })
                .collect()
        })
        .collect()
}

/// Compares one accuracy metric between two risk vectors by resampling
/// validation subjects with replacement (both models see the same
/// resamples). Returns `None` when the observed metric is undefined for
/// either model or no resample leaves both defined.
#[allow(clippy::too_many_arguments)]
pub fn paired_bootstrap(
    metric: AccuracyMetric,
    risks_a: &[f64],
    risks_b: &[f64],
    times: &[f64],
    events: &[u8],
    s: f64,
    t: f64,
    resamples: usize,
    seed: u64,
) -> Result<Option<PairedBootstrap>> {
    validate_window_inputs(risks_a, times, events, s, t)?;
    validate_window_inputs(risks_b, times, events, s, t)?;
    if resamples == 0 {
        return Err(HjmError::Domain("zero bootstrap resamples".into()));
    }
    let (est_a, est_b) = match (
        metric_on(metric, risks_a, times, events, s, t),
        metric_on(metric, risks_b, times, events, s, t),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Ok(None),
    };
    let idx = resample_indices(times.len(), resamples, seed);
    let reps = bootstrap_replicates(metric, &[risks_a, risks_b], times, events, s, t, &idx);
    let mut va = Vec::new();
    let mut vb = Vec::new();
    let mut diffs = Vec::new();
    for pair in &reps {
        if let (Some(a), Some(b)) = (pair[0], pair[1]) {
            va.push(a);
            vb.push(b);
            diffs.push(a - b);
        }
    }
    if diffs.is_empty() {
        return Ok(None);
    }
    let used = diffs.len();
    let le = diffs.iter().filter(|d| **d <= 0.0).count();
    let ge = diffs.iter().filter(|d| **d >= 0.0).count();
    let tail = (le.min(ge) + 1) as f64 / (used + 1) as f64;
    Ok(Some(PairedBootstrap {
        estimate_a: est_a,
        estimate_b: est_b,
        sd_a: variance(&va).sqrt(),
        sd_b: variance(&vb).sqrt(),
        diff: est_a - est_b,
        p_value: (2.0 * tail).min(1.0),
        resamples_used: used,
    }))
}

/// Bootstrap standard deviation of one model's accuracy metric, on the
/// same resamples as [`paired_bootstrap`] with the same seed.
pub fn bootstrap_sd(
    metric: AccuracyMetric,
    risks: &[f64],
    times: &[f64],
    events: &[u8],
    s: f64,
    t: f64,
    resamples: usize,
    seed: u64,
) -> Result<Option<f64>> {
    validate_window_inputs(risks, times, events, s, t)?;
    if resamples == 0 {
        return Err(HjmError::Domain("zero bootstrap resamples".into()));
    }
    if metric_on(metric, risks, times, events, s, t).is_none() {
        return Ok(None);
    }
    let idx = resample_indices(times.len(), resamples, seed);
    let reps = bootstrap_replicates(metric, &[risks], times, events, s, t, &idx);
    let vals: Vec<f64> = reps.iter().filter_map(|pair| pair[0]).collect();
    if vals.is_empty() {
        return Ok(None);
    }
    Ok(Some(variance(&vals).sqrt()))
}

// -- CSV output -------------------------------------------------------------

/// One `(landmark, window, metric, model)` cell of the accuracy panel.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub landmark: f64,
    pub window: f64,
    pub metric: AccuracyMetric,
    pub model: String,
    pub estimate: Option<f64>,
    pub sd: Option<f64>,
}

/// One integrated summary (`iauc` or `ibs`) per model.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratedRow {
    pub metric: AccuracyMetric,
    pub model: String,
    pub estimate: Option<f64>,
    pub sd: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Writes the landmark panel as `landmark,window,metric,model,estimate,sd`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "landmark,window,metric,model,estimate,sd")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.landmark,
            r.window,
            r.metric.label(),
            r.model,
            fmt_opt(r.estimate),
            fmt_opt(r.sd)
        )?;
    }
    Ok(())
}

/// Writes the integrated summaries as `metric,model,estimate,sd`, with
/// the metric labelled `iauc` or `ibs`.
pub fn write_integrated_csv(path: &Path, rows: &[IntegratedRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "metric,model,estimate,sd")?;
    for r in rows {
        let label = match r.metric {
            AccuracyMetric::Auc => "iauc",
            AccuracyMetric::Bs => "ibs",
        };
        writeln!(f, "{},{},{},{}", label, r.model, fmt_opt(r.estimate), fmt_opt(r.sd))?;
    }
    Ok(())
}

/// Writes replication summaries as
/// `parameter,true,est,sd,rb,rmse,cr,rb_absolute`.
pub fn write_estimation_csv(path: &Path, rows: &[EstimationRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "parameter,true,est,sd,rb,rmse,cr,rb_absolute")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.name, r.truth, r.est, r.sd, r.rb, r.rmse, r.cr, r.rb_is_absolute
        )?;
    }
    Ok(())
}
