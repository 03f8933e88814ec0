//! Synthetic-data generator for the joint model.
//!
//! Each subject gets four baseline covariates (`x1 ~ Bernoulli(0.5)`,
//! `x2 ~ N(0,1)` in the longitudinal file; `w1 ~ Bernoulli(0.5)`,
//! `w2 ~ N(0,1)` in the survival file), bivariate normal random effects for
//! the count process and a normal random intercept for the structural-zero
//! process. Counts follow the hurdle model on a fixed measurement grid;
//! event times come from the mixture-cure survival function by inverse
//! probability transform: one uniform draw `U` decides cure (`U < pi_c`)
//! and otherwise yields the event time in closed form, because both linear
//! predictors are affine in time and the baseline hazard is constant.
//!
//! Everything a fit cannot see is written to a truth sidecar (random
//! effects, cure flag, latent event time) so downstream evaluation can
//! benchmark against the generating mechanism.
//!
//! Determinism: subject `i` consumes only the stream
//! `SIM_SUBJECT_BASE + i` of the run seed, so datasets are reproducible
//! bit-for-bit and independent of subject evaluation order.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use crate::config::{SimOverrides, SimulationConfig};
use crate::cure::{risk_score, LinPred};
use crate::data::RawTables;
use crate::hurdle::Family;
use crate::util::{expit, stream_rng, streams};
use crate::{HjmError, Result};

/// True parameter values of the generating mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    /// Count fixed effects on `[intercept, time, x1, x2]`.
    pub beta1: Vec<f64>,
    /// Structural-zero fixed effects on `[intercept, time, x1]`.
    pub beta2: Vec<f64>,
    /// Cure-incidence coefficients on `[intercept, w1]`.
    pub xi1: Vec<f64>,
    /// Hazard covariate coefficients on `[w1, w2]`.
    pub xi2: Vec<f64>,
    /// Association of the count predictor with the hazard.
    pub alpha1: f64,
    /// Association of the structural-zero predictor with the hazard.
    pub alpha2: f64,
    /// Dispersion (ZINB only).
    pub r: f64,
    /// Covariance of `(u0, u1)`, row-major 2x2.
    pub d_u: [f64; 4],
    /// Variance of the structural-zero random intercept.
    pub sigma_b_sq: f64,
    /// Constant baseline hazard level.
    pub h0: f64,
}

/// A complete simulation scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub n_subjects: usize,
    pub family: Family,
    pub params: SimParams,
    /// Measurement grid (increasing, starting at 0).
    pub obs_grid: Vec<f64>,
    /// Administrative censoring time; everyone still at risk is censored
    /// here, cured subjects always are.
    pub tau: f64,
}

fn default_grid(step: f64, tau: f64) -> Vec<f64> {
    let n = (tau / step).round() as usize;
    (0..=n).map(|k| k as f64 * step).collect()
}

impl SimScenario {
    /// Named presets. `table1`/`table2` differ only in the dispersion
    /// (r = 0.2 vs r = 2); `prose` swaps in the alternative hazard
    /// coefficients (xi2 = (-1, 1), alpha1 = alpha2 = -0.5).
    pub fn preset(name: &str, n_subjects: usize) -> Result<SimScenario> {
        let base = SimParams {
            beta1: vec![0.5, 0.5, 0.5, -0.5],
            beta2: vec![-2.0, -0.5, 0.5],
            xi1: vec![-1.0, -1.0],
            xi2: vec![-0.5, -0.5],
            alpha1: -1.0,
            alpha2: 1.0,
            r: 2.0,
            d_u: [1.0, 0.5, 0.5, 1.0],
            sigma_b_sq: 1.0,
            h0: 1.0,
        };
        let params = match name {
            "table1" => SimParams { r: 0.2, ..base },
            "table2" => base,
            "prose" => SimParams {
                xi2: vec![-1.0, 1.0],
                alpha1: -0.5,
                alpha2: -0.5,
                ..base
            },
            other => {
                return Err(HjmError::Config(format!(
                    "unknown simulation preset {other:?} (available: table1, table2, prose)"
                )))
            }
        };
        Ok(SimScenario {
            n_subjects,
            family: Family::Zinb,
            params,
            obs_grid: default_grid(0.2, 2.0),
            tau: 2.0,
        })
    }

    /// Build a scenario from the configuration block: preset, then
    /// overrides, and the family taken from the model block of the run.
    pub fn from_config(sim: &SimulationConfig, family: Family) -> Result<SimScenario> {
        let mut sc = Self::preset(&sim.preset, sim.n_subjects)?;
        sc.family = family;
        let o: &SimOverrides = &sim.overrides;
        if let Some(v) = &o.beta1 {
            sc.params.beta1 = v.clone();
        }
        if let Some(v) = &o.beta2 {
            sc.params.beta2 = v.clone();
        }
        if let Some(v) = &o.xi1 {
            sc.params.xi1 = v.clone();
        }
        if let Some(v) = &o.xi2 {
            sc.params.xi2 = v.clone();
        }
        if let Some(v) = o.alpha1 {
            sc.params.alpha1 = v;
        }
        if let Some(v) = o.alpha2 {
            sc.params.alpha2 = v;
        }
        if let Some(v) = o.r {
            sc.params.r = v;
        }
        if let Some(v) = &o.d_u {
            sc.params.d_u = [v[0], v[1], v[2], v[3]];
        }
        if let Some(v) = o.sigma_b_sq {
            sc.params.sigma_b_sq = v;
        }
        if let Some(v) = o.h0 {
            sc.params.h0 = v;
        }
        if let Some(t) = o.tau {
            sc.tau = t;
        }
        if let Some(step) = o.grid_step {
            if !(step > 0.0) {
                return Err(HjmError::Config("grid_step must be positive".into()));
            }
            sc.obs_grid = default_grid(step, sc.tau);
        } else if o.tau.is_some() {
            sc.obs_grid = default_grid(0.2, sc.tau);
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if p.beta1.len() != 4 || p.beta2.len() != 3 || p.xi1.len() != 2 || p.xi2.len() != 2 {
            return Err(HjmError::Config(
                "simulation parameters must match the generator design \
                 (beta1: 4, beta2: 3, xi1: 2, xi2: 2 coefficients)"
                    .into(),
            ));
        }
        if !(p.r > 0.0) || !(p.h0 > 0.0) || !(p.sigma_b_sq > 0.0) {
            return Err(HjmError::Config("r, h0 and sigma_b_sq must be positive".into()));
        }
        let det = p.d_u[0] * p.d_u[3] - p.d_u[1] * p.d_u[2];
        if p.d_u[1] != p.d_u[2] || !(p.d_u[0] > 0.0) || !(det > 0.0) {
            return Err(HjmError::Config(
                "d_u must be symmetric positive definite".into(),
            ));
        }
        if self.obs_grid.is_empty()
            || self.obs_grid[0] != 0.0
            || self.obs_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(HjmError::Config(
                "observation grid must be increasing and start at 0".into(),
            ));
        }
        if self.tau < *self.obs_grid.last().unwrap() {
            return Err(HjmError::Config(
                "administrative censoring time must cover the measurement grid".into(),
            ));
        }
        Ok(())
    }
}

/// Per-subject ground truth, written to the sidecar file.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub id: String,
    pub u0: f64,
    pub u1: f64,
    pub b0: f64,
    pub cured: bool,
    /// Latent event time of a susceptible subject (may exceed the
    /// censoring time); infinite for cured subjects and for susceptible
    /// subjects whose declining hazard never accumulates enough mass.
    pub true_t: f64,
}

/// A generated dataset: raw tables in the standard CSV schema plus the
/// truth sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub raw: RawTables,
    pub truth: Vec<TruthRow>,
}

/// Outcome of the survival draw for one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventDraw {
    /// Observed time `min(t, tau)`.
    pub obs_time: f64,
    /// 1 if the latent event time fell inside the follow-up window.
    pub status: u8,
    pub cured: bool,
    /// Latent event time (infinite when no event would ever occur).
    pub true_t: f64,
}

/// Invert the population survival function at a uniform draw `u`.
///
/// `u < pi_c` means the survival curve never drops to `u`: the subject is
/// cured and censored administratively. Otherwise the event time solves
/// `exp(-H(t)) = v` with `v = (u - pi_c)/(1 - pi_c)` and
/// `H(t) = h0 e^{a} (e^{b t} - 1)/b`, giving
/// `t = log(1 - b log(v) / (h0 e^{a})) / b`; the `|b| < 1e-10` branch is
/// the exponential limit `t = -log(v)/(h0 e^{a})`. A negative slope caps
/// the total hazard at `h0 e^{a}/(-b)`; when `-log(v)` exceeds it the
/// subject never fails.
pub fn event_time_from_uniform(u: f64, pi_c: f64, g: &LinPred, h0: f64, tau: f64) -> EventDraw {
    if u < pi_c {
        return EventDraw { obs_time: tau, status: 0, cured: true, true_t: f64::INFINITY };
    }
    let v = (u - pi_c) / (1.0 - pi_c);
    let scale = h0 * g.a.exp();
    let log_v = v.ln();
    let t = if g.b.abs() < 1e-10 {
        -log_v / scale
    } else {
        let arg = 1.0 - g.b * log_v / scale;
        if arg <= 0.0 {
            f64::INFINITY
        } else {
            // ln(arg)/b via ln_1p for accuracy at small slopes.
            (-g.b * log_v / scale).ln_1p() / g.b
        }
    };
    if t <= tau {
        EventDraw { obs_time: t, status: 1, cured: false, true_t: t }
    } else {
        EventDraw { obs_time: tau, status: 0, cured: false, true_t: t }
    }
}

/// Sample one zero-truncated count. Rejection from the untruncated
/// distribution (Poisson, or Poisson mixed over a Gamma rate for the
/// negative binomial); when the untruncated zero mass exceeds 99% the
/// acceptance rate is too low and sampling switches to CDF inversion over
/// the truncated PMF.
fn sample_zt_count<R: Rng>(family: Family, lambda: f64, r: f64, rng: &mut R) -> u32 {
    let p0 = match family {
        Family::Zip => (-lambda).exp(),
        // kappa^r with log kappa = -log1p(lambda/r).
        Family::Zinb => (-r * (lambda / r).ln_1p()).exp(),
    };
    if p0 <= 0.99 {
        for _ in 0..10_000 {
            let y = match family {
                Family::Zip => Poisson::new(lambda).expect("positive rate").sample(rng),
                Family::Zinb => {
                    let mix = Gamma::new(r, lambda / r).expect("valid gamma").sample(rng);
                    if mix <= 0.0 {
                        0.0
                    } else {
                        Poisson::new(mix).expect("positive rate").sample(rng)
                    }
                }
            };
            if y >= 1.0 {
                return y as u32;
            }
        }
    }
    // Inversion over the truncated PMF.
    let target: f64 = rng.gen();
    let log_pmf = |y: u32| match family {
        Family::Zip => crate::hurdle::log_pmf_ztp(y, lambda).expect("valid"),
        Family::Zinb => crate::hurdle::log_pmf_ztnb(y, lambda, r).expect("valid"),
    };
    let mut cum = 0.0;
    let mut y = 1u32;
    loop {
        cum += log_pmf(y).exp();
        if cum >= target || y >= 10_000_000 {
            return y;
        }
        y += 1;
    }
}

struct SubjectDraw {
    x1: f64,
    x2: f64,
    w1: f64,
    w2: f64,
    u0: f64,
    u1: f64,
    b0: f64,
    event: EventDraw,
    /// `(time, count)` per retained grid point.
    counts: Vec<(f64, u32)>,
}

fn draw_subject(index: usize, sc: &SimScenario, seed: u64) -> SubjectDraw {
    let p = &sc.params;
    let mut rng = stream_rng(seed, streams::SIM_SUBJECT_BASE + index as u64);

    // Fixed draw order: covariates, effects, survival uniform, counts.
    let x1 = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
    let x2: f64 = StandardNormal.sample(&mut rng);
    let w1 = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
    let w2: f64 = StandardNormal.sample(&mut rng);

    // (u0, u1) = L z with L the Cholesky factor of d_u.
    let l11 = p.d_u[0].sqrt();
    let l21 = p.d_u[1] / l11;
    let l22 = (p.d_u[3] - l21 * l21).sqrt();
    let z0: f64 = StandardNormal.sample(&mut rng);
    let z1: f64 = StandardNormal.sample(&mut rng);
    let u0 = l11 * z0;
    let u1 = l21 * z0 + l22 * z1;
    let zb: f64 = StandardNormal.sample(&mut rng);
    let b0 = p.sigma_b_sq.sqrt() * zb;

    // Both predictors as affine functions of time.
    let eta_l = LinPred::new(p.beta1[0] + p.beta1[2] * x1 + p.beta1[3] * x2 + u0, p.beta1[1] + u1);
    let eta_z = LinPred::new(p.beta2[0] + p.beta2[2] * x1 + b0, p.beta2[1]);
    let g = risk_score(&p.xi2, &[w1, w2], p.alpha1, p.alpha2, eta_l, eta_z);
    let pi_c = expit(p.xi1[0] + p.xi1[1] * w1);

    let event = event_time_from_uniform(rng.gen(), pi_c, &g, p.h0, sc.tau);

    let mut counts = Vec::new();
    for &s in sc.obs_grid.iter().take_while(|&&s| s <= event.obs_time) {
        let pi_z = expit(eta_z.at(s));
        let y = if rng.gen::<f64>() < pi_z {
            0
        } else {
            sample_zt_count(sc.family, eta_l.at(s).exp(), p.r, &mut rng)
        };
        counts.push((s, y));
    }
    SubjectDraw { x1, x2, w1, w2, u0, u1, b0, event, counts }
}

/// Generate a full dataset (raw tables + truth sidecar) for a scenario.
pub fn simulate(sc: &SimScenario, seed: u64) -> Result<SimOutput> {
    sc.validate()?;
    let mut long_rows = Vec::new();
    let mut surv_rows = Vec::with_capacity(sc.n_subjects);
    let mut truth = Vec::with_capacity(sc.n_subjects);
    for i in 0..sc.n_subjects {
        let d = draw_subject(i, sc, seed);
        let id = (i + 1).to_string();
        for &(s, y) in &d.counts {
            long_rows.push((id.clone(), s, Some(y), vec![d.x1, d.x2]));
        }
        surv_rows.push((id.clone(), d.event.obs_time, d.event.status, vec![d.w1, d.w2]));
        truth.push(TruthRow {
            id,
            u0: d.u0,
            u1: d.u1,
            b0: d.b0,
            cured: d.event.cured,
            true_t: d.event.true_t,
        });
    }
    Ok(SimOutput {
        raw: RawTables {
            long_covar_names: vec!["x1".into(), "x2".into()],
            long_rows,
            surv_covar_names: vec!["w1".into(), "w2".into()],
            surv_rows,
        },
        truth,
    })
}

/// Write the truth sidecar (`id,u0,u1,b0,cured,true_t`); infinite latent
/// times are spelled `inf`.
pub fn write_truth_csv(path: &Path, truth: &[TruthRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "id,u0,u1,b0,cured,true_t")?;
    for t in truth {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            t.id,
            t.u0,
            t.u1,
            t.b0,
            u8::from(t.cured),
            t.true_t
        )?;
    }
    Ok(())
}

/// Read a truth sidecar back.
pub fn read_truth_csv(path: &Path) -> Result<Vec<TruthRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| HjmError::Schema(format!("cannot open {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| HjmError::Parse { row: i + 1, msg: e.to_string() })?;
        let field = |j: usize, what: &str| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| HjmError::Parse { row: i + 1, msg: format!("bad {what} field") })
        };
        rows.push(TruthRow {
            id: rec.get(0).unwrap_or_default().to_string(),
            u0: field(1, "u0")?,
            u1: field(2, "u1")?,
            b0: field(3, "b0")?,
            cured: field(4, "cured")? != 0.0,
            true_t: field(5, "true_t")?,
        });
    }
    Ok(rows)
}
