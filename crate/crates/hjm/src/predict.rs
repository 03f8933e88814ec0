//! Dynamic risk prediction for subjects who are event-free at a landmark.
//!
//! Given model parameters `theta` and a subject's effects `v = (u, b)`, the
//! probability of an event inside the window `(s, s + t]`, conditional on
//! being event-free at the landmark `s`, is a ratio of population survivals:
//!
//! `risk(s, t | v) = 1 - S_pop(s + t | v) / S_pop(s | v)`
//!
//! where `S_pop` mixes the cured point mass with the susceptible survival
//! function. The effects of a new subject are unknown, so they are drawn
//! from their conditional posterior given two pieces of information: the
//! count history observed up to `s` and the fact of being event-free at `s`.
//! A small random-walk Metropolis sampler targets that conditional.
//!
//! Two risk estimators are provided on top of it:
//!
//! * [`predict_first_order`] plugs the conditional *mean* of the effects
//!   into the ratio — one evaluation per subject, no parameter uncertainty;
//! * [`predict_mc`] repeats the exercise for many posterior parameter draws,
//!   resampling the effects each time, and summarizes the per-draw risks by
//!   their mean and central 95% interval.
//!
//! The posterior cure probabilities of the *fitted* subjects — the share of
//! censored patients the model considers cured — are summarized by
//! [`cure_posterior`], which reuses the same conditional-probability formula
//! as the latent-indicator update inside the sampler.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::EffectsMode;
use crate::cure::{cure_prob, risk_score, surv_population, surv_uncured_extended, LinPred};
use crate::data::{JointDataset, ModelSpec};
use crate::hurdle::{log_hurdle_pmf, Family};
use crate::posterior::{ParamLayout, ParamVector, Posterior};
use crate::sampler::PosteriorDraws;
use crate::util::{dot, quantile_sorted, stream_rng, streams, Matrix};
use crate::{HjmError, Result};

/// Inner effects sampler: total random-walk iterations per run.
const EFFECTS_ITERS: usize = 1500;
/// Iterations spent tuning the proposal scale; discarded.
const EFFECTS_BURNIN: usize = 500;
/// Post-burn-in thinning stride.
const EFFECTS_THIN: usize = 2;
/// Acceptance rate the scale adaptation steers toward.
const EFFECTS_TARGET_ACCEPT: f64 = 0.3;
/// Reserved draw index for the plug-in (conditional-mean) RNG stream, so
/// Monte Carlo draw streams and the plug-in stream never collide.
const MEAN_DRAW: u64 = 0xFFFF;

/// RNG stream of the effects sampler for `(subject, parameter draw)`.
fn effects_stream(subject: usize, draw: u64) -> u64 {
    streams::PREDICT_SUBJECT_BASE + ((subject as u64) << 16) + draw
}

/// A prediction request: event risk over `(s, s + t]` for subjects of `ds`
/// still event-free at the landmark `s`.
///
/// The dataset must have been built against the *fitted* model: same design
/// columns, same family and the fitted knot grid, so that parameter draws
/// from the fit line up with the design rows here.
pub struct PredictionRequest<'a> {
    pub ds: &'a JointDataset,
    pub family: Family,
    pub no_cure: bool,
    /// Landmark time; only subjects with `obs_time > s` are eligible.
    pub s: f64,
    /// Window length; the risk targets `(s, s + t]`. A zero window is
    /// allowed and yields risk exactly 0.
    pub t: f64,
}

impl<'a> PredictionRequest<'a> {
    pub fn new(ds: &'a JointDataset, spec: &ModelSpec, s: f64, t: f64) -> Result<Self> {
        if !s.is_finite() || s < 0.0 {
            return Err(HjmError::Domain(format!(
                "landmark must be finite and non-negative, got {s}"
            )));
        }
        if !t.is_finite() || t < 0.0 {
            return Err(HjmError::Domain(format!(
                "prediction window must be finite and non-negative, got {t}"
            )));
        }
        Ok(PredictionRequest { ds, family: spec.family, no_cure: spec.no_cure, s, t })
    }

    /// Dense indices of the subjects event-free at the landmark
    /// (strictly `obs_time > s`; a subject failing or censored exactly at
    /// `s` is not at risk afterwards).
    pub fn eligible(&self) -> Vec<usize> {
        (0..self.ds.n_subjects()).filter(|&i| self.ds.survival[i].time > self.s).collect()
    }
}

/// Thinned draws from one subject's conditional effects posterior.
#[derive(Debug)]
pub struct EffectsDraws {
    /// Kept draws, one row per draw, columns `(u, b)` concatenated.
    pub draws: Matrix,
    /// Post-adaptation acceptance rate of the random-walk sampler.
    pub accept_rate: f64,
}

impl EffectsDraws {
    /// Column means — the conditional-mean effects used by the plug-in risk.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.draws.cols];
        for k in 0..self.draws.rows {
            for (mj, &x) in m.iter_mut().zip(self.draws.row(k)) {
                *mj += x;
            }
        }
        for mj in &mut m {
            *mj /= self.draws.rows as f64;
        }
        m
    }
}

/// One subject's conditional-effects target: everything that does not
/// depend on the effects is folded into constants at construction.
struct EffectsTarget<'a> {
    req: &'a PredictionRequest<'a>,
    theta: &'a ParamVector,
    subject: usize,
    q1: usize,
    /// Retained measurement rows (global indices, times `<= s`).
    rows: Vec<usize>,
    /// Fixed-effect parts of the per-row linear predictors.
    row_eta_l: Vec<f64>,
    row_eta_z: Vec<f64>,
    /// Covariance factors of the effects prior (`D = A A'`).
    chol_u: Matrix,
    chol_b: Matrix,
    /// Cure incidence probability (0 when the model has no cured fraction).
    pi_c: f64,
    /// Fixed parts of the affine survival-time predictors
    /// `eta(t) = a + b t`.
    eta_l_a0: f64,
    eta_l_b0: f64,
    eta_z_a0: f64,
    eta_z_b0: f64,
    /// Random-effect design at the survival scale.
    z1_base: &'a [f64],
    z2_base: &'a [f64],
    u_time: Option<usize>,
    b_time: Option<usize>,
}

impl<'a> EffectsTarget<'a> {
    fn new(req: &'a PredictionRequest<'a>, theta: &'a ParamVector, subject: usize) -> Self {
        let ds = req.ds;
        let cov = &ds.covariates;
        let rows: Vec<usize> = ds.row_range[subject]
            .clone()
            .filter(|&g| ds.longitudinal[g].time <= req.s)
            .collect();
        let row_eta_l = rows.iter().map(|&g| dot(cov.x1.row(g), &theta.beta1)).collect();
        let row_eta_z = rows.iter().map(|&g| dot(cov.x2.row(g), &theta.beta2)).collect();
        let pi_c = if req.no_cure {
            0.0
        } else {
            cure_prob(&theta.xi1, cov.w1.row(subject))
        };
        EffectsTarget {
            req,
            theta,
            subject,
            q1: cov.z1.cols,
            rows,
            row_eta_l,
            row_eta_z,
            chol_u: theta.scaled_chol_u(),
            chol_b: theta.scaled_chol_b(),
            pi_c,
            eta_l_a0: dot(cov.x1_base.row(subject), &theta.beta1),
            eta_l_b0: ds.design.x1_time().map_or(0.0, |j| theta.beta1[j]),
            eta_z_a0: dot(cov.x2_base.row(subject), &theta.beta2),
            eta_z_b0: ds.design.x2_time().map_or(0.0, |j| theta.beta2[j]),
            z1_base: cov.z1_base.row(subject),
            z2_base: cov.z2_base.row(subject),
            u_time: ds.design.z1_time(),
            b_time: ds.design.z2_time(),
        }
    }

    /// Combined log relative risk `G(t)` of this subject at effects `v`.
    fn risk_lin(&self, u: &[f64], b: &[f64]) -> LinPred {
        let w2 = self.req.ds.covariates.w2.row(self.subject);
        let eta_l = LinPred::new(
            self.eta_l_a0 + dot(self.z1_base, u),
            self.eta_l_b0 + self.u_time.map_or(0.0, |j| u[j]),
        );
        let eta_z = LinPred::new(
            self.eta_z_a0 + dot(self.z2_base, b),
            self.eta_z_b0 + self.b_time.map_or(0.0, |j| b[j]),
        );
        risk_score(&self.theta.xi2, w2, self.theta.alpha1, self.theta.alpha2, eta_l, eta_z)
    }

    /// Population survival at time `x` given effects.
    fn population_survival(&self, x: f64, u: &[f64], b: &[f64]) -> Result<f64> {
        let g = self.risk_lin(u, b);
        let ds = self.req.ds;
        let s_u = surv_uncured_extended(x, &ds.knots, &self.theta.h_star, &g)?;
        surv_population(self.pi_c, s_u)
    }

    /// Unnormalized conditional log-density of the effects: count history up
    /// to the landmark, effects prior, and the event-free-at-`s` factor.
    /// Returns `-inf` (not an error) when the survival factor underflows.
    fn log_density(&self, v: &[f64]) -> Result<f64> {
        let (u, b) = v.split_at(self.q1);
        let mut lp = mvn_logpdf_chol(u, &self.chol_u) + mvn_logpdf_chol(b, &self.chol_b);
        let ds = self.req.ds;
        for (k, &g) in self.rows.iter().enumerate() {
            let eta_l = self.row_eta_l[k] + dot(ds.covariates.z1.row(g), u);
            let eta_z = self.row_eta_z[k] + dot(ds.covariates.z2.row(g), b);
            lp += log_hurdle_pmf(
                ds.longitudinal[g].y,
                eta_l,
                eta_z,
                self.req.family,
                self.theta.r,
            )?;
        }
        if self.req.s > 0.0 {
            lp += self.population_survival(self.req.s, u, b)?.ln();
        }
        Ok(lp)
    }

    /// Conditional risk over `(s, s + t]` at fixed effects.
    ///
    /// Without a cured fraction the ratio of survivals collapses to
    /// `1 - exp(-(H(s+t) - H(s)))`, which stays accurate even where the
    /// individual survival factors underflow.
    fn risk(&self, u: &[f64], b: &[f64]) -> Result<f64> {
        let req = self.req;
        let g = self.risk_lin(u, b);
        let ds = req.ds;
        if self.pi_c == 0.0 {
            let h_s = crate::cure::cum_hazard_extended(req.s, &ds.knots, &self.theta.h_star, &g)?;
            let h_st =
                crate::cure::cum_hazard_extended(req.s + req.t, &ds.knots, &self.theta.h_star, &g)?;
            return Ok(-(-(h_st - h_s)).exp_m1());
        }
        let s_u_s = surv_uncured_extended(req.s, &ds.knots, &self.theta.h_star, &g)?;
        let s_u_st = surv_uncured_extended(req.s + req.t, &ds.knots, &self.theta.h_star, &g)?;
        let den = surv_population(self.pi_c, s_u_s)?;
        let num = surv_population(self.pi_c, s_u_st)?;
        Ok(1.0 - num / den)
    }
}

/// Log-density of `N(0, A A')` at `x` with `A` lower triangular; an empty
/// vector contributes exactly zero.
fn mvn_logpdf_chol(x: &[f64], a: &Matrix) -> f64 {
    let q = x.len();
    debug_assert_eq!(a.rows, q);
    let mut y = x.to_vec();
    let mut logdet = 0.0;
    for i in 0..q {
        let mut s = y[i];
        for j in 0..i {
            s -= a.get(i, j) * y[j];
        }
        let d = a.get(i, i);
        y[i] = s / d;
        logdet += d.ln();
    }
    let quad: f64 = y.iter().map(|v| v * v).sum();
    -0.5 * quad - logdet - 0.5 * q as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Generic adaptive random-walk Metropolis core.
///
/// Proposals are isotropic in the preconditioned space: coordinate `k` moves
/// by `exp(log_step) * scale[k] * z_k`. During the first `EFFECTS_BURNIN`
/// iterations the global log-step follows a decaying stochastic
/// approximation toward [`EFFECTS_TARGET_ACCEPT`]; afterwards the scale is
/// frozen and every [`EFFECTS_THIN`]-th state is kept.
fn rwm_sample(
    target: impl Fn(&[f64]) -> Result<f64>,
    scale: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<EffectsDraws> {
    let dim = scale.len();
    let kept_n = (EFFECTS_ITERS - EFFECTS_BURNIN) / EFFECTS_THIN;
    let mut kept = Matrix::zeros(kept_n, dim);
    let mut v = vec![0.0; dim];
    let mut lp = target(&v)?;
    let mut log_step = 0.0f64;
    let mut burn_accepts = 0usize;
    let mut post_accepts = 0usize;
    let mut cand = vec![0.0; dim];
    let mut stored = 0usize;
    for m in 0..EFFECTS_ITERS {
        let step = log_step.exp();
        for k in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            cand[k] = v[k] + step * scale[k] * z;
        }
        // A non-finite candidate density is a plain rejection; the alpha
        // used for adaptation is the acceptance probability, which carries
        // more signal than the accept indicator.
        let lp_cand = target(&cand).unwrap_or(f64::NEG_INFINITY);
        let alpha = if !lp_cand.is_finite() {
            0.0
        } else if lp_cand >= lp {
            1.0
        } else {
            (lp_cand - lp).exp()
        };
        let accepted = alpha > 0.0 && rng.gen::<f64>() < alpha;
        if accepted {
            v.copy_from_slice(&cand);
            lp = lp_cand;
        }
        if m < EFFECTS_BURNIN {
            burn_accepts += usize::from(accepted);
            let gain = 1.0 / (1.0 + m as f64).powf(0.6);
            log_step += gain * (alpha - EFFECTS_TARGET_ACCEPT);
            if m + 1 == EFFECTS_BURNIN && burn_accepts == 0 {
                return Err(HjmError::StepScale(
                    "no accepted proposal during the effects-sampler adaptation window"
                        .into(),
                ));
            }
        } else {
            post_accepts += usize::from(accepted);
            if (m - EFFECTS_BURNIN) % EFFECTS_THIN == EFFECTS_THIN - 1 {
                kept.row_mut(stored).copy_from_slice(&v);
                stored += 1;
            }
        }
    }
    debug_assert_eq!(stored, kept_n);
    Ok(EffectsDraws {
        draws: kept,
        accept_rate: post_accepts as f64 / (EFFECTS_ITERS - EFFECTS_BURNIN) as f64,
    })
}

/// Draws from the conditional posterior of one subject's effects given the
/// count history up to the landmark and survival (event-free) to it.
///
/// The proposal is preconditioned by the marginal prior standard deviations
/// of the effects, which are the right order of magnitude for the
/// conditional as well: the history tightens the posterior, but with the
/// short histories typical at a landmark, rarely by more than a small
/// factor, and the adaptive global scale absorbs the difference.
pub fn sample_effects_conditional(
    req: &PredictionRequest<'_>,
    theta: &ParamVector,
    subject: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EffectsDraws> {
    let target = EffectsTarget::new(req, theta, subject);
    let cov_u = theta.cov_u();
    let cov_b = theta.cov_b();
    let mut scale: Vec<f64> = (0..cov_u.rows).map(|k| cov_u.get(k, k).sqrt()).collect();
    scale.extend((0..cov_b.rows).map(|k| cov_b.get(k, k).sqrt()));
    rwm_sample(|v| target.log_density(v), &scale, rng)
}

/// Conditional risk over `(s, s + t]` for fixed effects `v = (u, b)` — the
/// deterministic core shared by both estimators. Two subjects with the same
/// survival design have identical risk here regardless of their count
/// histories: the history enters prediction only through the effects
/// posterior.
pub fn risk_given_effects(
    req: &PredictionRequest<'_>,
    theta: &ParamVector,
    subject: usize,
    v: &[f64],
) -> Result<f64> {
    let target = EffectsTarget::new(req, theta, subject);
    let (u, b) = v.split_at(req.ds.covariates.z1.cols);
    target.risk(u, b)
}

/// Plug-in dynamic risk: the ratio of population survivals evaluated at the
/// empirical mean of the conditional effects distribution.
pub fn predict_first_order(
    req: &PredictionRequest<'_>,
    theta: &ParamVector,
    subject: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream_rng(seed, effects_stream(subject, MEAN_DRAW));
    let draws = sample_effects_conditional(req, theta, subject, &mut rng)?;
    risk_given_effects(req, theta, subject, &draws.mean())
}

/// Dynamic risk with posterior uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    /// Mean of the per-draw risks.
    pub risk_mean: f64,
    /// 2.5% quantile of the per-draw risks (never above the mean).
    pub lo: f64,
    /// 97.5% quantile of the per-draw risks (never below the mean).
    pub hi: f64,
    /// One risk per parameter draw, in draw order.
    pub per_draw: Vec<f64>,
}

/// Monte Carlo dynamic risk over posterior parameter draws.
///
/// For each draw `theta_j` the subject's effects are refreshed — either a
/// new conditional *sample* (the full scheme) or the conditional *mean*
/// (a cheaper plug-in per draw) — and the risk ratio is evaluated; the
/// per-draw risks are summarized by their mean and central 95% interval.
///
/// Effects runs use per-`(subject, draw)` RNG streams, so results do not
/// depend on evaluation order and parallel execution is deterministic. The
/// conditional-mean mode deliberately reuses one stream across draws
/// (common random numbers): the mean is a deterministic functional of the
/// draw, and identical draws then reproduce the plug-in risk exactly.
pub fn predict_mc(
    req: &PredictionRequest<'_>,
    thetas: &[ParamVector],
    subject: usize,
    mode: EffectsMode,
    seed: u64,
) -> Result<PredictionResult> {
    if thetas.is_empty() {
        return Err(HjmError::Domain("Monte Carlo prediction needs at least one draw".into()));
    }
    if thetas.len() as u64 >= MEAN_DRAW {
        return Err(HjmError::Domain(format!(
            "at most {} parameter draws per prediction are supported",
            MEAN_DRAW - 1
        )));
    }
    let per_draw: Vec<f64> = thetas
        .par_iter()
        .enumerate()
        .map(|(j, theta)| {
            let stream_draw = match mode {
                EffectsMode::Sampled => j as u64,
                EffectsMode::ConditionalMean => MEAN_DRAW,
            };
            let mut rng = stream_rng(seed, effects_stream(subject, stream_draw));
            let draws = sample_effects_conditional(req, theta, subject, &mut rng)?;
            let v = match mode {
                // One conditional sample per parameter draw: the final state
                // of the inner chain.
                EffectsMode::Sampled => draws.draws.row(draws.draws.rows - 1).to_vec(),
                EffectsMode::ConditionalMean => draws.mean(),
            };
            risk_given_effects(req, theta, subject, &v)
        })
        .collect::<Result<Vec<f64>>>()?;
    let risk_mean = per_draw.iter().sum::<f64>() / per_draw.len() as f64;
    let mut sorted = per_draw.clone();
    sorted.sort_by(f64::total_cmp);
    // With extreme skew the mean can escape the central percentiles; widen
    // the interval so it always covers the point estimate.
    let lo = quantile_sorted(&sorted, 0.025).min(risk_mean);
    let hi = quantile_sorted(&sorted, 0.975).max(risk_mean);
    Ok(PredictionResult { risk_mean, lo, hi, per_draw })
}

/// Evenly thinned parameter draws pooled across chains: `count` rows taken
/// at a regular stride through the concatenated kept draws, in chain order.
pub fn thin_param_draws(
    draws: &PosteriorDraws,
    layout: &ParamLayout,
    count: usize,
) -> Result<Vec<ParamVector>> {
    let total: usize = draws.chains.iter().map(|c| c.constrained.rows).sum();
    if count == 0 || total == 0 {
        return Err(HjmError::Domain("draw thinning needs draws and a positive count".into()));
    }
    let take = count.min(total);
    let row_of = |k: usize| -> &[f64] {
        let mut k = k;
        for c in &draws.chains {
            if k < c.constrained.rows {
                return c.constrained.row(k);
            }
            k -= c.constrained.rows;
        }
        unreachable!("index within pooled draws");
    };
    Ok((0..take)
        .map(|j| {
            let k = j * total / take;
            ParamVector::from_flat(layout, &row_of(k)[..layout.fixed_len()])
        })
        .collect())
}

/// Posterior cure probabilities of the fitted subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct CurePosterior {
    /// Per-subject posterior mean of `P(cured | data)`; exactly 0 for
    /// subjects with an observed event.
    pub mean: Vec<f64>,
    /// Per-subject 2.5% quantiles.
    pub lo: Vec<f64>,
    /// Per-subject 97.5% quantiles.
    pub hi: Vec<f64>,
    /// Expected cured fraction of the sample: the subject-average cure
    /// probability per draw, summarized as (mean, 2.5%, 97.5%).
    pub population: (f64, f64, f64),
}

/// Summarizes `P(cured | data)` for every fitted subject across posterior
/// draws. Per draw this is the same conditional probability that drives the
/// latent-indicator refresh inside the sampler — one formula, one
/// implementation — so the means here are the Rao-Blackwellized versions of
/// the stored indicator frequencies.
pub fn cure_posterior(post: &Posterior, draws: &PosteriorDraws) -> Result<CurePosterior> {
    let n = post.n_subjects();
    let total: usize = draws.chains.iter().map(|c| c.unconstrained.rows).sum();
    if total == 0 {
        return Err(HjmError::Domain("cure summaries need at least one draw".into()));
    }
    let mut per_subject = Matrix::zeros(n, total);
    let mut population = Vec::with_capacity(total);
    let mut k = 0;
    for chain in &draws.chains {
        for r in 0..chain.unconstrained.rows {
            let probs = post.cured_probs(chain.unconstrained.row(r));
            let mut sum = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                per_subject.set(i, k, p);
                sum += p;
            }
            population.push(sum / n as f64);
            k += 1;
        }
    }
    let mut mean = Vec::with_capacity(n);
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = per_subject.row(i).to_vec();
        mean.push(row.iter().sum::<f64>() / total as f64);
        row.sort_by(f64::total_cmp);
        lo.push(quantile_sorted(&row, 0.025));
        hi.push(quantile_sorted(&row, 0.975));
    }
    let pop_mean = population.iter().sum::<f64>() / total as f64;
    population.sort_by(f64::total_cmp);
    Ok(CurePosterior {
        mean,
        lo,
        hi,
        population: (
            pop_mean,
            quantile_sorted(&population, 0.025),
            quantile_sorted(&population, 0.975),
        ),
    })
}

/// Point-estimate cure probabilities: `P(cured | data)` per subject at one
/// unconstrained parameter vector, plus the subject average.
pub fn cure_posterior_point(post: &Posterior, w: &[f64]) -> (Vec<f64>, f64) {
    let probs = post.cured_probs(w);
    let avg = probs.iter().sum::<f64>() / probs.len().max(1) as f64;
    (probs, avg)
}

/// One output row of the prediction pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub s: f64,
    pub t: f64,
    pub risk_mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Writes prediction rows as CSV with the `id,s,t,risk_mean,lo,hi` schema.
pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "id,s,t,risk_mean,lo,hi")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{},{}", r.id, r.s, r.t, r.risk_mean, r.lo, r.hi)?;
    }
    Ok(())
}
