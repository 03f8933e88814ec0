//! Joint posterior of the hurdle-count / cure-survival model.
//!
//! This module owns the model's parameter bookkeeping and its log target:
//!
//! * [`ParamLayout`] maps named blocks (regression coefficients,
//!   associations, baseline hazard levels, dispersion, random-effect scales
//!   and canonical partial correlations, per-subject effects) to positions in
//!   one flat vector.
//! * [`ParamVector`] holds the constrained, interpretable parameters;
//!   [`Posterior::to_unconstrained`] / [`Posterior::from_unconstrained`] move
//!   between that view and the unconstrained vector the samplers work on
//!   (logs for positive scalars, `atanh` for partial correlations,
//!   whitened per-subject effects).
//! * [`Posterior::log_density_grad`] evaluates the unconstrained target and
//!   its full analytic gradient in one pass. Per-subject contributions are
//!   combined with a fixed pairwise reduction tree, so totals are
//!   bit-reproducible no matter how the work is scheduled.
//!
//! The latent cure indicators are conditioned on, not integrated out: the
//! density accepts one susceptibility weight per subject, either hard 0/1
//! indicators (Gibbs sampling) or fractional weights in `[0, 1]`
//! (variational fits take the exact expectation over the indicator, which is
//! valid because the target is linear in it).
//!
//! Correlation matrices are parameterized through the canonical partial
//! correlations of their Cholesky factors: row `i` of the factor is built
//! from `i` values in `(-1, 1)`, each mapped through `tanh` from an
//! unconstrained coordinate. The matching prior is placed directly on those
//! partial correlations, with the level-dependent Beta shapes that make the
//! implied correlation matrix follow the standard shape-`eta` distribution.

use std::ops::Range;

use crate::cure::{prob_cured_given_survival, seg_exp_integral, seg_exp_integral_db, segment_of};
use crate::data::{validate_spec, JointDataset, ModelSpec, Priors};
use crate::hurdle::{row_zip, row_ztnb, Family, NbTables};
use crate::util::{
    dot, expit, ln_beta, ln_gamma, log_add_exp, log_expit, tree_reduce_rows, tree_sum_in_place,
    Matrix,
};
use crate::{HjmError, Result};

/// Partial correlations are kept strictly inside `(-1, 1)` by this margin so
/// the `atanh` coordinate stays finite.
const CPC_CLAMP: f64 = 1.0 - 1e-12;

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

/// Positions of every parameter block inside the flat vector.
///
/// The fixed block comes first: `beta1`, `beta2`, `xi1`, `xi2`, `alpha1`,
/// `alpha2`, baseline hazard levels, optional dispersion, then scale and
/// partial-correlation coordinates for both random-effect blocks. After it
/// come `n_subjects` contiguous latent blocks of `q1 + q2` whitened effects.
///
/// The same slot order serves both scales: the unconstrained vector stores
/// `log h`, `log r`, `log sigma` and `atanh` partial correlations in the
/// slots where the constrained view stores `h`, `r`, `sigma` and the partial
/// correlations themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub p1: usize,
    pub p2: usize,
    pub r1: usize,
    pub r2: usize,
    pub q1: usize,
    pub q2: usize,
    pub n_seg: usize,
    pub has_r: bool,
    pub n_subjects: usize,
    o_beta2: usize,
    o_xi1: usize,
    o_xi2: usize,
    o_alpha1: usize,
    o_alpha2: usize,
    o_log_h: usize,
    o_log_r: usize,
    o_log_sigma_u: usize,
    o_cpc_u: usize,
    o_log_sigma_b: usize,
    o_cpc_b: usize,
    fixed: usize,
}

impl ParamLayout {
    pub fn new(
        design: &crate::data::DesignInfo,
        family: Family,
        n_seg: usize,
        n_subjects: usize,
    ) -> ParamLayout {
        let (p1, p2) = (design.x1.len(), design.x2.len());
        let (q1, q2) = (design.z1.len(), design.z2.len());
        let (r1, r2) = (design.w1.len(), design.w2.len());
        let has_r = family == Family::Zinb;
        let mut o = p1;
        let o_beta2 = o;
        o += p2;
        let o_xi1 = o;
        o += r1;
        let o_xi2 = o;
        o += r2;
        let o_alpha1 = o;
        o += 1;
        let o_alpha2 = o;
        o += 1;
        let o_log_h = o;
        o += n_seg;
        let o_log_r = o;
        if has_r {
            o += 1;
        }
        let o_log_sigma_u = o;
        o += q1;
        let o_cpc_u = o;
        o += q1 * (q1 - 1) / 2;
        let o_log_sigma_b = o;
        o += q2;
        let o_cpc_b = o;
        o += q2 * (q2 - 1) / 2;
        ParamLayout {
            p1,
            p2,
            r1,
            r2,
            q1,
            q2,
            n_seg,
            has_r,
            n_subjects,
            o_beta2,
            o_xi1,
            o_xi2,
            o_alpha1,
            o_alpha2,
            o_log_h,
            o_log_r,
            o_log_sigma_u,
            o_cpc_u,
            o_log_sigma_b,
            o_cpc_b,
            fixed: o,
        }
    }

    pub fn beta1(&self) -> Range<usize> {
        0..self.p1
    }
    pub fn beta2(&self) -> Range<usize> {
        self.o_beta2..self.o_beta2 + self.p2
    }
    pub fn xi1(&self) -> Range<usize> {
        self.o_xi1..self.o_xi1 + self.r1
    }
    pub fn xi2(&self) -> Range<usize> {
        self.o_xi2..self.o_xi2 + self.r2
    }
    pub fn alpha1(&self) -> usize {
        self.o_alpha1
    }
    pub fn alpha2(&self) -> usize {
        self.o_alpha2
    }
    pub fn log_h(&self) -> Range<usize> {
        self.o_log_h..self.o_log_h + self.n_seg
    }
    pub fn log_r(&self) -> Option<usize> {
        self.has_r.then_some(self.o_log_r)
    }
    pub fn log_sigma_u(&self) -> Range<usize> {
        self.o_log_sigma_u..self.o_log_sigma_u + self.q1
    }
    pub fn cpc_u(&self) -> Range<usize> {
        self.o_cpc_u..self.o_cpc_u + self.n_cpc_u()
    }
    pub fn log_sigma_b(&self) -> Range<usize> {
        self.o_log_sigma_b..self.o_log_sigma_b + self.q2
    }
    pub fn cpc_b(&self) -> Range<usize> {
        self.o_cpc_b..self.o_cpc_b + self.n_cpc_b()
    }
    pub fn n_cpc_u(&self) -> usize {
        self.q1 * (self.q1 - 1) / 2
    }
    pub fn n_cpc_b(&self) -> usize {
        self.q2 * (self.q2 - 1) / 2
    }

    /// Length of the fixed (population-level) block.
    pub fn fixed_len(&self) -> usize {
        self.fixed
    }
    /// Latent coordinates per subject.
    pub fn latent_stride(&self) -> usize {
        self.q1 + self.q2
    }
    /// Whitened count-model effects of subject `i`.
    pub fn u_tilde(&self, i: usize) -> Range<usize> {
        let s = self.fixed + i * self.latent_stride();
        s..s + self.q1
    }
    /// Whitened zero-model effects of subject `i`.
    pub fn b_tilde(&self, i: usize) -> Range<usize> {
        let s = self.fixed + i * self.latent_stride() + self.q1;
        s..s + self.q2
    }
    /// Total vector length (fixed block plus all latent blocks).
    pub fn dim(&self) -> usize {
        self.fixed + self.n_subjects * self.latent_stride()
    }

    /// Names of the fixed-block slots on the constrained scale, in slot
    /// order. Indices are zero-based; partial correlations are labelled by
    /// their `(row, column)` position in the Cholesky factor.
    pub fn names(&self) -> Vec<String> {
        let mut v = Vec::with_capacity(self.fixed);
        for j in 0..self.p1 {
            v.push(format!("beta1[{j}]"));
        }
        for j in 0..self.p2 {
            v.push(format!("beta2[{j}]"));
        }
        for j in 0..self.r1 {
            v.push(format!("xi1[{j}]"));
        }
        for j in 0..self.r2 {
            v.push(format!("xi2[{j}]"));
        }
        v.push("alpha1".into());
        v.push("alpha2".into());
        for q in 0..self.n_seg {
            v.push(format!("h_star[{q}]"));
        }
        if self.has_r {
            v.push("r".into());
        }
        for k in 0..self.q1 {
            v.push(format!("sigma_u[{k}]"));
        }
        for i in 1..self.q1 {
            for j in 0..i {
                v.push(format!("cpc_u[{i},{j}]"));
            }
        }
        for k in 0..self.q2 {
            v.push(format!("sigma_b[{k}]"));
        }
        for i in 1..self.q2 {
            for j in 0..i {
                v.push(format!("cpc_b[{i},{j}]"));
            }
        }
        debug_assert_eq!(v.len(), self.fixed);
        v
    }
}

// ---------------------------------------------------------------------------
// constrained parameters
// ---------------------------------------------------------------------------

/// Population-level parameters on their natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub xi1: Vec<f64>,
    pub xi2: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Baseline hazard level per segment.
    pub h_star: Vec<f64>,
    /// Negative binomial dispersion; `None` for the Poisson family.
    pub r: Option<f64>,
    pub sigma_u: Vec<f64>,
    /// Canonical partial correlations of the count-effects correlation
    /// factor, row-major below the diagonal.
    pub cpc_u: Vec<f64>,
    pub sigma_b: Vec<f64>,
    pub cpc_b: Vec<f64>,
}

/// Builds the Cholesky factor of a correlation matrix from its canonical
/// partial correlations (row-major, `q (q - 1) / 2` values in `(-1, 1)`).
/// Row `i` sets `L[i][j] = z_ij * sqrt(1 - s_j)` where `s_j` is the running
/// sum of squares already placed in that row, then closes with
/// `L[i][i] = sqrt(1 - s_i)`; every row has unit norm by construction.
fn vine_chol(z: &[f64], q: usize) -> Matrix {
    debug_assert_eq!(z.len(), q * (q - 1) / 2);
    let mut l = Matrix::zeros(q, q);
    if q == 0 {
        return l;
    }
    l.set(0, 0, 1.0);
    let mut idx = 0;
    for i in 1..q {
        let mut s: f64 = 0.0;
        for j in 0..i {
            let w = (1.0 - s).sqrt();
            let lij = z[idx] * w;
            idx += 1;
            l.set(i, j, lij);
            s += lij * lij;
        }
        l.set(i, i, (1.0 - s).sqrt());
    }
    l
}

/// Reverse-mode pass through [`vine_chol`]: folds an adjoint of the factor
/// (lower triangle including the diagonal) into adjoints of the partial
/// correlations. Accumulates into `gz`.
fn vine_backprop(z: &[f64], q: usize, gl: &Matrix, gz: &mut [f64]) {
    let mut row_start = 0;
    for i in 1..q {
        let k = i;
        let zs = &z[row_start..row_start + k];
        // Recompute the forward sweep of this row.
        let mut s = vec![0.0f64; k + 1];
        let mut lv = vec![0.0f64; k];
        for j in 0..k {
            let w = (1.0 - s[j]).sqrt();
            lv[j] = zs[j] * w;
            s[j + 1] = s[j] + lv[j] * lv[j];
        }
        let ld = (1.0 - s[k]).sqrt();
        // The diagonal depends on the row's sum of squares; seed the
        // running adjoint of `s` from it and walk the row backwards.
        let mut gs = -gl.get(i, i) / (2.0 * ld);
        for j in (0..k).rev() {
            let w = (1.0 - s[j]).sqrt();
            let gl_total = gl.get(i, j) + gs * 2.0 * lv[j];
            gz[row_start + j] += gl_total * w;
            gs += gl_total * zs[j] * (-0.5 / w);
        }
        row_start += k;
    }
}

/// Covariance implied by scales and partial correlations:
/// `D = (sigma o L)(sigma o L)'` with `o` scaling row `k` by `sigma_k`.
fn cov_from(sigma: &[f64], z: &[f64]) -> Matrix {
    let q = sigma.len();
    let l = vine_chol(z, q);
    Matrix::from_fn(q, q, |i, j| {
        let mut s = 0.0;
        for m in 0..=i.min(j) {
            s += sigma[i] * l.get(i, m) * sigma[j] * l.get(j, m);
        }
        s
    })
}

impl ParamVector {
    /// Cholesky factor of the count-effects correlation matrix.
    pub fn chol_u(&self) -> Matrix {
        vine_chol(&self.cpc_u, self.sigma_u.len())
    }
    /// Cholesky factor of the zero-effects correlation matrix.
    pub fn chol_b(&self) -> Matrix {
        vine_chol(&self.cpc_b, self.sigma_b.len())
    }

    /// Covariance factor `sigma o L` for the count effects (lower
    /// triangular; `D_u = A A'`).
    pub fn scaled_chol_u(&self) -> Matrix {
        let l = self.chol_u();
        Matrix::from_fn(l.rows, l.cols, |i, j| self.sigma_u[i] * l.get(i, j))
    }
    /// Covariance factor for the zero effects.
    pub fn scaled_chol_b(&self) -> Matrix {
        let l = self.chol_b();
        Matrix::from_fn(l.rows, l.cols, |i, j| self.sigma_b[i] * l.get(i, j))
    }

    /// Covariance matrix of the count effects.
    pub fn cov_u(&self) -> Matrix {
        cov_from(&self.sigma_u, &self.cpc_u)
    }
    /// Covariance matrix of the zero effects.
    pub fn cov_b(&self) -> Matrix {
        cov_from(&self.sigma_b, &self.cpc_b)
    }

    /// Flat fixed block in [`ParamLayout::names`] order.
    pub fn flatten(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut v = Vec::with_capacity(layout.fixed_len());
        v.extend_from_slice(&self.beta1);
        v.extend_from_slice(&self.beta2);
        v.extend_from_slice(&self.xi1);
        v.extend_from_slice(&self.xi2);
        v.push(self.alpha1);
        v.push(self.alpha2);
        v.extend_from_slice(&self.h_star);
        if let Some(r) = self.r {
            v.push(r);
        }
        v.extend_from_slice(&self.sigma_u);
        v.extend_from_slice(&self.cpc_u);
        v.extend_from_slice(&self.sigma_b);
        v.extend_from_slice(&self.cpc_b);
        debug_assert_eq!(v.len(), layout.fixed_len());
        v
    }

    /// Rebuilds the constrained parameters from a flat fixed block.
    pub fn from_flat(layout: &ParamLayout, row: &[f64]) -> ParamVector {
        assert_eq!(row.len(), layout.fixed_len(), "flat parameter block has the wrong length");
        ParamVector {
            beta1: row[layout.beta1()].to_vec(),
            beta2: row[layout.beta2()].to_vec(),
            xi1: row[layout.xi1()].to_vec(),
            xi2: row[layout.xi2()].to_vec(),
            alpha1: row[layout.alpha1()],
            alpha2: row[layout.alpha2()],
            h_star: row[layout.log_h()].to_vec(),
            r: layout.log_r().map(|j| row[j]),
            sigma_u: row[layout.log_sigma_u()].to_vec(),
            cpc_u: row[layout.cpc_u()].to_vec(),
            sigma_b: row[layout.log_sigma_b()].to_vec(),
            cpc_b: row[layout.cpc_b()].to_vec(),
        }
    }

    /// Derived covariance summaries: entries of both random-effect
    /// covariance matrices and the implied correlations, named
    /// `d_u[i,j]`, `rho_u[i,j]`, `d_b[i,j]`, `rho_b[i,j]`.
    pub fn derived(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (tag, sigma, cpc) in
            [("u", &self.sigma_u, &self.cpc_u), ("b", &self.sigma_b, &self.cpc_b)]
        {
            let q = sigma.len();
            let d = cov_from(sigma, cpc);
            for i in 0..q {
                for j in 0..=i {
                    out.push((format!("d_{tag}[{i},{j}]"), d.get(i, j)));
                }
            }
            for i in 1..q {
                for j in 0..i {
                    let rho = d.get(i, j) / (d.get(i, i) * d.get(j, j)).sqrt();
                    out.push((format!("rho_{tag}[{i},{j}]"), rho));
                }
            }
        }
        out
    }

    fn view(&self) -> ThetaView<'_> {
        ThetaView {
            beta1: &self.beta1,
            beta2: &self.beta2,
            xi1: &self.xi1,
            xi2: &self.xi2,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            h: &self.h_star,
        }
    }
}

/// Latent state carried alongside the parameter vector by the samplers.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// Whitened count-model effects, one row per subject.
    pub u_tilde: Matrix,
    /// Whitened zero-model effects, one row per subject.
    pub b_tilde: Matrix,
    /// Susceptibility indicators: 1 = susceptible, 0 = cured.
    pub cure: Vec<u8>,
}

// ---------------------------------------------------------------------------
// posterior
// ---------------------------------------------------------------------------

/// The parameter slices every likelihood evaluation needs, independent of
/// which representation they came from.
struct ThetaView<'a> {
    beta1: &'a [f64],
    beta2: &'a [f64],
    xi1: &'a [f64],
    xi2: &'a [f64],
    alpha1: f64,
    alpha2: f64,
    h: &'a [f64],
}

/// Everything materialized from one unconstrained vector.
struct Unpacked {
    beta1: Vec<f64>,
    beta2: Vec<f64>,
    xi1: Vec<f64>,
    xi2: Vec<f64>,
    alpha1: f64,
    alpha2: f64,
    h: Vec<f64>,
    r: f64,
    ln_r: f64,
    sigma_u: Vec<f64>,
    z_u: Vec<f64>,
    /// `sigma_u o chol(corr_u)`, the covariance factor of the count effects.
    a_u: Matrix,
    sigma_b: Vec<f64>,
    z_b: Vec<f64>,
    a_b: Matrix,
}

impl Unpacked {
    fn view(&self) -> ThetaView<'_> {
        ThetaView {
            beta1: &self.beta1,
            beta2: &self.beta2,
            xi1: &self.xi1,
            xi2: &self.xi2,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            h: &self.h,
        }
    }
}

/// Per-subject survival factor and the handful of scalars its gradient
/// chains through.
#[derive(Debug, Clone, Copy)]
struct SurvOut {
    ll: f64,
    /// d ll / d (intercept of the relative-risk score).
    g_a: f64,
    /// d ll / d (slope of the relative-risk score).
    g_b: f64,
    /// d ll / d (incidence linear predictor).
    g_xc: f64,
    /// Intercept/slope of the two longitudinal predictors at this subject's
    /// baseline covariates (needed to chain `g_a`/`g_b` outward).
    a_l: f64,
    b_l: f64,
    a_z: f64,
    b_z: f64,
    /// Cumulative hazard at the observed time.
    big_h: f64,
    /// Incidence linear predictor.
    xc: f64,
}

/// Joint posterior over one prepared dataset: flattened data arrays plus the
/// layout, family, priors and knot grid. All evaluation methods take `&self`
/// so chains can share one instance.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub layout: ParamLayout,
    family: Family,
    no_cure: bool,
    priors: Priors,
    knots: Vec<f64>,
    // longitudinal rows (aligned with the design matrices)
    row_y: Vec<u32>,
    row_lgfact: Vec<f64>,
    x1: Matrix,
    z1: Matrix,
    x2: Matrix,
    z2: Matrix,
    row_range: Vec<Range<usize>>,
    // survival data, one entry per subject
    obs_time: Vec<f64>,
    delta: Vec<u8>,
    seg_of_obs: Vec<usize>,
    /// `(segment, lo, hi)` integration pieces per subject, concatenated.
    overlaps: Vec<(usize, f64, f64)>,
    overlap_range: Vec<Range<usize>>,
    w1: Matrix,
    w2: Matrix,
    x1_base: Matrix,
    z1_base: Matrix,
    x2_base: Matrix,
    z2_base: Matrix,
    x1_t: Option<usize>,
    z1_t: Option<usize>,
    x2_t: Option<usize>,
    z2_t: Option<usize>,
    y_max: u32,
}

/// Forward substitution `A x = y` for lower-triangular `A`.
fn forward_solve(a: &Matrix, y: &[f64], out: &mut [f64]) {
    for k in 0..a.rows {
        let mut s = y[k];
        for m in 0..k {
            s -= a.get(k, m) * out[m];
        }
        out[k] = s / a.get(k, k);
    }
}

/// `out = A x` for lower-triangular `A`.
fn mat_vec_lower(a: &Matrix, x: &[f64], out: &mut [f64]) {
    for k in 0..a.rows {
        let mut s = 0.0;
        for m in 0..=k {
            s += a.get(k, m) * x[m];
        }
        out[k] = s;
    }
}

/// Mean-zero multivariate normal log-density with covariance `A A'`.
fn ln_mvn_zero(x: &[f64], a: &Matrix) -> f64 {
    let q = x.len();
    let mut v = vec![0.0; q];
    forward_solve(a, x, &mut v);
    let mut log_det = 0.0;
    for k in 0..q {
        log_det += a.get(k, k).ln();
    }
    -0.5 * q as f64 * (2.0 * std::f64::consts::PI).ln() - log_det - 0.5 * dot(&v, &v)
}

/// Log-density of one canonical partial correlation under the shape-`eta`
/// correlation prior: `(z + 1) / 2 ~ Beta(b, b)` with the level-dependent
/// shape `b`.
fn lkj_cpc_logpdf(z: f64, b: f64) -> f64 {
    -ln_beta(b, b) + (b - 1.0) * ((1.0 - z * z) / 4.0).ln() - std::f64::consts::LN_2
}

impl Posterior {
    /// Prepares the posterior over a validated dataset. The spec must be the
    /// one the dataset was built with.
    pub fn new(ds: &JointDataset, spec: &ModelSpec) -> Result<Posterior> {
        validate_spec(spec)?;
        if ds.design != spec.design {
            return Err(HjmError::InvalidSpec(
                "dataset was materialized under a different design".into(),
            ));
        }
        let n = ds.n_subjects();
        let layout = ParamLayout::new(&ds.design, spec.family, ds.knots.len(), n);
        let mut overlaps = Vec::new();
        let mut overlap_range = Vec::with_capacity(n);
        let mut seg_of_obs = Vec::with_capacity(n);
        for s in &ds.survival {
            seg_of_obs.push(segment_of(s.time, &ds.knots)?);
            let start = overlaps.len();
            let mut lo = 0.0;
            for (q, &k) in ds.knots.iter().enumerate() {
                let hi = k.min(s.time);
                if hi <= lo {
                    break;
                }
                overlaps.push((q, lo, hi));
                lo = k;
            }
            overlap_range.push(start..overlaps.len());
        }
        Ok(Posterior {
            layout,
            family: spec.family,
            no_cure: spec.no_cure,
            priors: spec.priors.clone(),
            knots: ds.knots.clone(),
            row_y: ds.longitudinal.iter().map(|r| r.y).collect(),
            row_lgfact: ds.longitudinal.iter().map(|r| ln_gamma(r.y as f64 + 1.0)).collect(),
            x1: ds.covariates.x1.clone(),
            z1: ds.covariates.z1.clone(),
            x2: ds.covariates.x2.clone(),
            z2: ds.covariates.z2.clone(),
            row_range: ds.row_range.clone(),
            obs_time: ds.survival.iter().map(|s| s.time).collect(),
            delta: ds.survival.iter().map(|s| s.status).collect(),
            seg_of_obs,
            overlaps,
            overlap_range,
            w1: ds.covariates.w1.clone(),
            w2: ds.covariates.w2.clone(),
            x1_base: ds.covariates.x1_base.clone(),
            z1_base: ds.covariates.z1_base.clone(),
            x2_base: ds.covariates.x2_base.clone(),
            z2_base: ds.covariates.z2_base.clone(),
            x1_t: ds.design.x1_time(),
            z1_t: ds.design.z1_time(),
            x2_t: ds.design.x2_time(),
            z2_t: ds.design.z2_time(),
            y_max: ds.longitudinal.iter().map(|r| r.y).max().unwrap_or(0),
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.layout.n_subjects
    }
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }
    pub fn family(&self) -> Family {
        self.family
    }
    pub fn no_cure(&self) -> bool {
        self.no_cure
    }
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }
    pub fn priors(&self) -> &Priors {
        &self.priors
    }
    /// Event indicator per subject (1 = observed event).
    pub fn event_indicator(&self) -> &[u8] {
        &self.delta
    }
    /// Observed event or censoring time per subject.
    pub fn observed_times(&self) -> &[f64] {
        &self.obs_time
    }
    /// Layout of the unconstrained coordinate vector.
    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Observed event count and total at-risk exposure per baseline segment.
    ///
    /// These anchor data-scaled starting values for the log baseline-hazard
    /// coordinates: hazards near events/exposure keep early trajectories
    /// away from numerically extreme survival terms.
    pub fn segment_totals(&self) -> (Vec<f64>, Vec<f64>) {
        let q = self.knots.len();
        let mut events = vec![0.0; q];
        let mut exposure = vec![0.0; q];
        for i in 0..self.delta.len() {
            if self.delta[i] == 1 {
                events[self.seg_of_obs[i]] += 1.0;
            }
        }
        for &(seg, lo, hi) in &self.overlaps {
            exposure[seg] += hi - lo;
        }
        (events, exposure)
    }

    // -- representation changes --------------------------------------------

    fn unpack_raw(&self, w: &[f64]) -> Unpacked {
        let l = &self.layout;
        let (r, ln_r) = match l.log_r() {
            Some(j) => (w[j].exp(), w[j]),
            None => (f64::NAN, f64::NAN),
        };
        let sigma_u: Vec<f64> = w[l.log_sigma_u()].iter().map(|x| x.exp()).collect();
        let z_u: Vec<f64> =
            w[l.cpc_u()].iter().map(|v| v.tanh().clamp(-CPC_CLAMP, CPC_CLAMP)).collect();
        let sigma_b: Vec<f64> = w[l.log_sigma_b()].iter().map(|x| x.exp()).collect();
        let z_b: Vec<f64> =
            w[l.cpc_b()].iter().map(|v| v.tanh().clamp(-CPC_CLAMP, CPC_CLAMP)).collect();
        let lu = vine_chol(&z_u, l.q1);
        let a_u = Matrix::from_fn(l.q1, l.q1, |i, j| sigma_u[i] * lu.get(i, j));
        let lb = vine_chol(&z_b, l.q2);
        let a_b = Matrix::from_fn(l.q2, l.q2, |i, j| sigma_b[i] * lb.get(i, j));
        Unpacked {
            beta1: w[l.beta1()].to_vec(),
            beta2: w[l.beta2()].to_vec(),
            xi1: w[l.xi1()].to_vec(),
            xi2: w[l.xi2()].to_vec(),
            alpha1: w[l.alpha1()],
            alpha2: w[l.alpha2()],
            h: w[l.log_h()].iter().map(|x| x.exp()).collect(),
            r,
            ln_r,
            sigma_u,
            z_u,
            a_u,
            sigma_b,
            z_b,
            a_b,
        }
    }

    /// Materializes the constrained view of an unconstrained vector:
    /// parameters plus per-subject effects `u = A_u u~`, `b = A_b b~`.
    pub fn from_unconstrained(&self, w: &[f64]) -> (ParamVector, Matrix, Matrix) {
        assert_eq!(w.len(), self.dim(), "unconstrained vector has the wrong length");
        let l = &self.layout;
        let up = self.unpack_raw(w);
        let mut u = Matrix::zeros(l.n_subjects, l.q1);
        let mut b = Matrix::zeros(l.n_subjects, l.q2);
        for i in 0..l.n_subjects {
            mat_vec_lower(&up.a_u, &w[l.u_tilde(i)], u.row_mut(i));
            mat_vec_lower(&up.a_b, &w[l.b_tilde(i)], b.row_mut(i));
        }
        let theta = ParamVector {
            beta1: up.beta1,
            beta2: up.beta2,
            xi1: up.xi1,
            xi2: up.xi2,
            alpha1: up.alpha1,
            alpha2: up.alpha2,
            h_star: up.h,
            r: l.log_r().map(|_| up.r),
            sigma_u: up.sigma_u,
            cpc_u: up.z_u,
            sigma_b: up.sigma_b,
            cpc_b: up.z_b,
        };
        (theta, u, b)
    }

    /// Inverse of [`Posterior::from_unconstrained`]. Fails when a positive
    /// parameter is out of support or a block has the wrong length.
    pub fn to_unconstrained(&self, theta: &ParamVector, u: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
        let l = &self.layout;
        let check = |name: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(HjmError::Domain(format!(
                    "parameter block {name} has length {got}, expected {want}"
                )));
            }
            Ok(())
        };
        check("beta1", theta.beta1.len(), l.p1)?;
        check("beta2", theta.beta2.len(), l.p2)?;
        check("xi1", theta.xi1.len(), l.r1)?;
        check("xi2", theta.xi2.len(), l.r2)?;
        check("h_star", theta.h_star.len(), l.n_seg)?;
        check("sigma_u", theta.sigma_u.len(), l.q1)?;
        check("cpc_u", theta.cpc_u.len(), l.n_cpc_u())?;
        check("sigma_b", theta.sigma_b.len(), l.q2)?;
        check("cpc_b", theta.cpc_b.len(), l.n_cpc_b())?;
        if l.has_r != theta.r.is_some() {
            return Err(HjmError::Domain(
                "dispersion parameter presence does not match the family".into(),
            ));
        }
        if u.rows != l.n_subjects || u.cols != l.q1 || b.rows != l.n_subjects || b.cols != l.q2 {
            return Err(HjmError::Domain("effects matrices have the wrong shape".into()));
        }
        for (name, vals) in [("h_star", &theta.h_star), ("sigma_u", &theta.sigma_u),
            ("sigma_b", &theta.sigma_b)]
        {
            if vals.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(HjmError::Domain(format!("{name} must be positive and finite")));
            }
        }
        if let Some(r) = theta.r {
            if !(r > 0.0) || !r.is_finite() {
                return Err(HjmError::Domain("dispersion must be positive and finite".into()));
            }
        }
        if theta.cpc_u.iter().chain(&theta.cpc_b).any(|z| !z.is_finite() || z.abs() >= 1.0) {
            return Err(HjmError::Domain("partial correlations must lie inside (-1, 1)".into()));
        }

        let mut w = vec![0.0; self.dim()];
        w[l.beta1()].copy_from_slice(&theta.beta1);
        w[l.beta2()].copy_from_slice(&theta.beta2);
        w[l.xi1()].copy_from_slice(&theta.xi1);
        w[l.xi2()].copy_from_slice(&theta.xi2);
        w[l.alpha1()] = theta.alpha1;
        w[l.alpha2()] = theta.alpha2;
        for (slot, &h) in l.log_h().zip(&theta.h_star) {
            w[slot] = h.ln();
        }
        if let Some(j) = l.log_r() {
            w[j] = theta.r.expect("validated").ln();
        }
        for (slot, &s) in l.log_sigma_u().zip(&theta.sigma_u) {
            w[slot] = s.ln();
        }
        for (slot, &z) in l.cpc_u().zip(&theta.cpc_u) {
            w[slot] = z.clamp(-CPC_CLAMP, CPC_CLAMP).atanh();
        }
        for (slot, &s) in l.log_sigma_b().zip(&theta.sigma_b) {
            w[slot] = s.ln();
        }
        for (slot, &z) in l.cpc_b().zip(&theta.cpc_b) {
            w[slot] = z.clamp(-CPC_CLAMP, CPC_CLAMP).atanh();
        }
        let a_u = theta.scaled_chol_u();
        let a_b = theta.scaled_chol_b();
        let mut buf_u = vec![0.0; l.q1];
        let mut buf_b = vec![0.0; l.q2];
        for i in 0..l.n_subjects {
            forward_solve(&a_u, u.row(i), &mut buf_u);
            w[l.u_tilde(i)].copy_from_slice(&buf_u);
            forward_solve(&a_b, b.row(i), &mut buf_b);
            w[l.b_tilde(i)].copy_from_slice(&buf_b);
        }
        Ok(w)
    }

    /// Log absolute determinant of the map from the unconstrained vector to
    /// the constrained one: the log coordinates contribute themselves, each
    /// `tanh` contributes `ln(1 - z^2)`, and every subject's effects
    /// contribute the log-determinant of its covariance factor.
    pub fn log_jacobian(&self, w: &[f64]) -> f64 {
        let l = &self.layout;
        let up = self.unpack_raw(w);
        let mut j = 0.0;
        for idx in l.log_h() {
            j += w[idx];
        }
        if let Some(idx) = l.log_r() {
            j += w[idx];
        }
        for idx in l.log_sigma_u().chain(l.log_sigma_b()) {
            j += w[idx];
        }
        for &z in up.z_u.iter().chain(&up.z_b) {
            j += (1.0 - z * z).ln();
        }
        let mut per_subject = 0.0;
        for k in 0..l.q1 {
            per_subject += up.a_u.get(k, k).ln();
        }
        for k in 0..l.q2 {
            per_subject += up.a_b.get(k, k).ln();
        }
        j + l.n_subjects as f64 * per_subject
    }

    // -- constrained-scale evaluations --------------------------------------

    /// Log prior density of the constrained parameters; `-inf` outside the
    /// support (non-positive scales, correlations outside `(-1, 1)`).
    pub fn log_prior(&self, theta: &ParamVector) -> f64 {
        let p = &self.priors;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let finite = theta
            .beta1
            .iter()
            .chain(&theta.beta2)
            .chain(&theta.xi1)
            .chain(&theta.xi2)
            .chain([&theta.alpha1, &theta.alpha2])
            .all(|v| v.is_finite());
        if !finite {
            return f64::NEG_INFINITY;
        }
        let support_pos =
            |v: &[f64]| v.iter().all(|&x| x.is_finite() && x > 0.0);
        if !support_pos(&theta.h_star)
            || !support_pos(&theta.sigma_u)
            || !support_pos(&theta.sigma_b)
            || theta.r.is_some_and(|r| !(r > 0.0) || !r.is_finite())
            || theta.cpc_u.iter().chain(&theta.cpc_b).any(|z| !z.is_finite() || z.abs() >= 1.0)
        {
            return f64::NEG_INFINITY;
        }

        let mut lp = 0.0;
        for (xs, sd) in [
            (&theta.beta1, p.beta_sd),
            (&theta.beta2, p.beta_sd),
            (&theta.xi1, p.xi_sd),
            (&theta.xi2, p.xi_sd),
        ] {
            for &x in xs {
                lp += -0.5 * ln2pi - sd.ln() - 0.5 * (x / sd) * (x / sd);
            }
        }
        for x in [theta.alpha1, theta.alpha2] {
            let sd = p.alpha_sd;
            lp += -0.5 * ln2pi - sd.ln() - 0.5 * (x / sd) * (x / sd);
        }
        for &h in &theta.h_star {
            lp += p.h_shape * p.h_rate.ln() - ln_gamma(p.h_shape) + (p.h_shape - 1.0) * h.ln()
                - p.h_rate * h;
        }
        if let Some(r) = theta.r {
            lp += p.r_shape * p.r_rate.ln() - ln_gamma(p.r_shape) + (p.r_shape - 1.0) * r.ln()
                - p.r_rate * r;
        }
        for sigmas in [&theta.sigma_u, &theta.sigma_b] {
            for &s in sigmas.iter() {
                lp += std::f64::consts::LN_2
                    - std::f64::consts::PI.ln()
                    - p.sigma_scale.ln()
                    - (s * s / (p.sigma_scale * p.sigma_scale)).ln_1p();
            }
        }
        for (cpc, q) in [(&theta.cpc_u, theta.sigma_u.len()), (&theta.cpc_b, theta.sigma_b.len())]
        {
            let mut idx = 0;
            for i in 1..q {
                for j in 0..i {
                    let b = p.lkj_eta + (q as f64 - 2.0 - j as f64) / 2.0;
                    lp += lkj_cpc_logpdf(cpc[idx], b);
                    idx += 1;
                }
            }
        }
        lp
    }

    /// Joint log-density of data, effects and parameters on the constrained
    /// scale, conditional on the susceptibility indicators.
    pub fn log_joint(
        &self,
        theta: &ParamVector,
        u: &Matrix,
        b: &Matrix,
        cure: &[u8],
    ) -> Result<f64> {
        let lp = self.log_prior(theta);
        if lp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let c_w: Vec<f64> = cure.iter().map(|&c| c as f64).collect();
        let mut per = self.subject_logliks_weighted(theta, u, b, &c_w)?;
        let a_u = theta.scaled_chol_u();
        let a_b = theta.scaled_chol_b();
        for i in 0..self.n_subjects() {
            per[i] += ln_mvn_zero(u.row(i), &a_u) + ln_mvn_zero(b.row(i), &a_b);
        }
        Ok(tree_sum_in_place(&mut per) + lp)
    }

    /// Observed-data log-likelihood of every subject (count rows plus the
    /// survival factor), given materialized effects and hard indicators.
    /// No prior or random-effect density terms are included.
    pub fn subject_logliks(
        &self,
        theta: &ParamVector,
        u: &Matrix,
        b: &Matrix,
        cure: &[u8],
    ) -> Result<Vec<f64>> {
        let c_w: Vec<f64> = cure.iter().map(|&c| c as f64).collect();
        self.subject_logliks_weighted(theta, u, b, &c_w)
    }

    /// [`Posterior::subject_logliks`] with fractional susceptibility
    /// weights (the density is linear in each indicator, so a weight `c`
    /// yields the exact expected log-density over the indicator).
    pub fn subject_logliks_weighted(
        &self,
        theta: &ParamVector,
        u: &Matrix,
        b: &Matrix,
        c_w: &[f64],
    ) -> Result<Vec<f64>> {
        let l = &self.layout;
        self.validate_weights(c_w)?;
        if u.rows != l.n_subjects || u.cols != l.q1 || b.rows != l.n_subjects || b.cols != l.q2 {
            return Err(HjmError::Domain("effects matrices have the wrong shape".into()));
        }
        let th = theta.view();
        let (r, ln_r, tab) = self.count_tables(theta.r)?;
        let mut out = vec![0.0; l.n_subjects];
        for i in 0..l.n_subjects {
            let mut ll = 0.0;
            for rix in self.row_range[i].clone() {
                let e = self.eval_row(rix, &th, u.row(i), b.row(i), r, ln_r, tab.as_ref());
                ll += e.ll;
            }
            ll += self.surv_eval(i, &th, u.row(i), b.row(i), c_w[i], None).ll;
            out[i] = ll;
        }
        Ok(out)
    }

    /// Per-subject conditional log-likelihood with the susceptibility
    /// indicator summed out in closed form.
    ///
    /// The count factors are untouched; the survival factor becomes the
    /// mixture `(1-pi) f_u` for events and `pi + (1-pi) S_u` for censored
    /// subjects — the sum of the two hard-indicator joint densities, so it
    /// is computed as a stable `log_add_exp` of those.
    pub fn subject_logliks_marginal(
        &self,
        theta: &ParamVector,
        u: &Matrix,
        b: &Matrix,
    ) -> Result<Vec<f64>> {
        let l = &self.layout;
        if u.rows != l.n_subjects || u.cols != l.q1 || b.rows != l.n_subjects || b.cols != l.q2 {
            return Err(HjmError::Domain("effects matrices have the wrong shape".into()));
        }
        let th = theta.view();
        let (r, ln_r, tab) = self.count_tables(theta.r)?;
        let mut out = vec![0.0; l.n_subjects];
        for i in 0..l.n_subjects {
            let mut ll = 0.0;
            for rix in self.row_range[i].clone() {
                let e = self.eval_row(rix, &th, u.row(i), b.row(i), r, ln_r, tab.as_ref());
                ll += e.ll;
            }
            let susceptible = self.surv_eval(i, &th, u.row(i), b.row(i), 1.0, None).ll;
            ll += if self.no_cure || self.delta[i] == 1 {
                susceptible
            } else {
                let cured = self.surv_eval(i, &th, u.row(i), b.row(i), 0.0, None).ll;
                log_add_exp(susceptible, cured)
            };
            out[i] = ll;
        }
        Ok(out)
    }

    // -- unconstrained-scale evaluations ------------------------------------

    /// Unconstrained log target (joint density plus transform Jacobian),
    /// conditional on hard susceptibility indicators.
    pub fn log_density(&self, w: &[f64], cure: &[u8]) -> Result<f64> {
        let c_w: Vec<f64> = cure.iter().map(|&c| c as f64).collect();
        self.density_core(w, &c_w, None)
    }

    /// [`Posterior::log_density`] with fractional susceptibility weights.
    pub fn log_density_weighted(&self, w: &[f64], c_w: &[f64]) -> Result<f64> {
        self.density_core(w, c_w, None)
    }

    /// Unconstrained log target and its gradient. `grad` must have length
    /// [`Posterior::dim`] and is overwritten.
    ///
    /// A return value of `-inf` marks a numerically impossible state (for
    /// example an overflowing hazard); the gradient contents are unspecified
    /// there and callers should treat the point as rejected. A NaN target or
    /// a non-finite gradient component at a finite target is an error
    /// carrying the first offending coordinate.
    pub fn log_density_grad(&self, w: &[f64], cure: &[u8], grad: &mut [f64]) -> Result<f64> {
        let c_w: Vec<f64> = cure.iter().map(|&c| c as f64).collect();
        self.density_core(w, &c_w, Some(grad))
    }

    /// [`Posterior::log_density_grad`] with fractional weights.
    pub fn log_density_grad_weighted(
        &self,
        w: &[f64],
        c_w: &[f64],
        grad: &mut [f64],
    ) -> Result<f64> {
        self.density_core(w, c_w, Some(grad))
    }

    /// Conditional probability that each subject is cured given its data and
    /// the current parameters: zero for subjects with observed events (and
    /// for every subject under the no-cure reduction), otherwise
    /// `pi_c / (pi_c + (1 - pi_c) S_u(t))`. This is the Gibbs update law for
    /// the susceptibility indicators and the basis of reported cure
    /// summaries.
    pub fn cured_probs(&self, w: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let mut out = vec![0.0; l.n_subjects];
        if self.no_cure {
            return out;
        }
        let up = self.unpack_raw(w);
        let th = up.view();
        let mut u = vec![0.0; l.q1];
        let mut b = vec![0.0; l.q2];
        for i in 0..l.n_subjects {
            if self.delta[i] == 1 {
                continue;
            }
            mat_vec_lower(&up.a_u, &w[l.u_tilde(i)], &mut u);
            mat_vec_lower(&up.a_b, &w[l.b_tilde(i)], &mut b);
            let so = self.surv_eval(i, &th, &u, &b, 1.0, None);
            out[i] = prob_cured_given_survival(expit(so.xc), (-so.big_h).exp());
        }
        out
    }

    // -- internals -----------------------------------------------------------

    fn count_tables(&self, r: Option<f64>) -> Result<(f64, f64, Option<NbTables>)> {
        match self.family {
            Family::Zip => Ok((f64::NAN, f64::NAN, None)),
            Family::Zinb => {
                let r = r.ok_or_else(|| {
                    HjmError::Domain("negative binomial family requires a dispersion".into())
                })?;
                if !(r > 0.0) || !r.is_finite() {
                    return Err(HjmError::Domain(format!(
                        "dispersion must be positive and finite, got {r}"
                    )));
                }
                Ok((r, r.ln(), Some(NbTables::new(r, self.y_max))))
            }
        }
    }

    fn eval_row(
        &self,
        rix: usize,
        th: &ThetaView<'_>,
        u: &[f64],
        b: &[f64],
        r: f64,
        ln_r: f64,
        tab: Option<&NbTables>,
    ) -> crate::hurdle::RowEval {
        let eta_l = dot(self.x1.row(rix), th.beta1) + dot(self.z1.row(rix), u);
        let eta_z = dot(self.x2.row(rix), th.beta2) + dot(self.z2.row(rix), b);
        let y = self.row_y[rix];
        let lgf = self.row_lgfact[rix];
        match self.family {
            Family::Zip => row_zip(y, lgf, eta_l, eta_z),
            Family::Zinb => row_ztnb(y, lgf, eta_l, eta_z, r, ln_r, tab.expect("tables built")),
        }
    }

    fn validate_weights(&self, c_w: &[f64]) -> Result<()> {
        if c_w.len() != self.layout.n_subjects {
            return Err(HjmError::Domain(format!(
                "{} susceptibility weights for {} subjects",
                c_w.len(),
                self.layout.n_subjects
            )));
        }
        for (i, &c) in c_w.iter().enumerate() {
            if !c.is_finite() || !(0.0..=1.0).contains(&c) {
                return Err(HjmError::Domain(format!(
                    "susceptibility weight {c} of subject index {i} outside [0, 1]"
                )));
            }
            if self.delta[i] == 1 && c != 1.0 {
                return Err(HjmError::Consistency(format!(
                    "subject index {i} has an observed event but is treated as cured"
                )));
            }
            if self.no_cure && c != 1.0 {
                return Err(HjmError::Consistency(format!(
                    "subject index {i} marked cured under the no-cure reduction"
                )));
            }
        }
        Ok(())
    }

    /// Survival factor of one subject with susceptibility weight `c`.
    ///
    /// When `gh` is given, per-segment log-hazard adjoints are accumulated
    /// into it (length `n_seg`) and the returned scalars `g_a`, `g_b`,
    /// `g_xc` carry the rest of the gradient; otherwise only `ll` (and the
    /// descriptive fields) are meaningful.
    fn surv_eval(
        &self,
        i: usize,
        th: &ThetaView<'_>,
        u: &[f64],
        b: &[f64],
        c: f64,
        gh: Option<&mut [f64]>,
    ) -> SurvOut {
        let a_l = dot(self.x1_base.row(i), th.beta1) + dot(self.z1_base.row(i), u);
        let b_l = self.x1_t.map_or(0.0, |j| th.beta1[j]) + self.z1_t.map_or(0.0, |j| u[j]);
        let a_z = dot(self.x2_base.row(i), th.beta2) + dot(self.z2_base.row(i), b);
        let b_z = self.x2_t.map_or(0.0, |j| th.beta2[j]) + self.z2_t.map_or(0.0, |j| b[j]);
        let ga = dot(self.w2.row(i), th.xi2) + th.alpha1 * a_l + th.alpha2 * a_z;
        let gb = th.alpha1 * b_l + th.alpha2 * b_z;
        let t = self.obs_time[i];
        let delta = self.delta[i] as f64;
        let ega = ga.exp();
        // Zero-weight subjects contribute no hazard terms; the guard also
        // keeps `0 * inf` out of the arithmetic when the hazard overflows.
        let cx = |x: f64| if c > 0.0 { c * x } else { 0.0 };

        let mut big_h = 0.0;
        let (g_a, g_b) = match gh {
            Some(gh) => {
                let mut hb = 0.0;
                for &(q, lo, hi) in &self.overlaps[self.overlap_range[i].clone()] {
                    let term = th.h[q] * ega * seg_exp_integral(gb, lo, hi);
                    big_h += term;
                    hb += th.h[q] * ega * seg_exp_integral_db(gb, lo, hi);
                    gh[q] -= cx(term);
                }
                gh[self.seg_of_obs[i]] += c * delta;
                (cx(delta - big_h), cx(delta * t - hb))
            }
            None => {
                for &(q, lo, hi) in &self.overlaps[self.overlap_range[i].clone()] {
                    big_h += th.h[q] * ega * seg_exp_integral(gb, lo, hi);
                }
                (0.0, 0.0)
            }
        };

        let event_part =
            if self.delta[i] == 1 { th.h[self.seg_of_obs[i]].ln() + ga + gb * t } else { 0.0 };
        let (ll, g_xc, xc);
        if self.no_cure {
            ll = event_part - big_h;
            g_xc = 0.0;
            xc = f64::NEG_INFINITY;
        } else {
            xc = dot(self.w1.row(i), th.xi1);
            let mut acc = cx(log_expit(-xc) + event_part - big_h);
            if c < 1.0 {
                acc += (1.0 - c) * log_expit(xc);
            }
            ll = acc;
            g_xc = (1.0 - c) - expit(xc);
        }
        SurvOut { ll, g_a, g_b, g_xc, a_l, b_l, a_z, b_z, big_h, xc }
    }

    /// Shared value/gradient evaluation of the unconstrained target.
    fn density_core(&self, w: &[f64], c_w: &[f64], mut grad: Option<&mut [f64]>) -> Result<f64> {
        let l = &self.layout;
        if w.len() != l.dim() {
            return Err(HjmError::Domain(format!(
                "parameter vector has length {}, expected {}",
                w.len(),
                l.dim()
            )));
        }
        self.validate_weights(c_w)?;
        if let Some(g) = grad.as_deref_mut() {
            if g.len() != l.dim() {
                return Err(HjmError::Domain(format!(
                    "gradient buffer has length {}, expected {}",
                    g.len(),
                    l.dim()
                )));
            }
            g.fill(0.0);
        }
        let up = self.unpack_raw(w);
        let th = up.view();
        let (r, ln_r, tab) = match self.family {
            Family::Zip => (f64::NAN, f64::NAN, None),
            Family::Zinb => (up.r, up.ln_r, Some(NbTables::new(up.r, self.y_max))),
        };
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let n = l.n_subjects;
        let want_grad = grad.is_some();

        // Per-subject scratch: one row of fixed-block adjoints plus the
        // adjoints of both Cholesky factors (lower triangles incl. diagonal),
        // reduced over subjects with the fixed pairwise tree.
        let glu_w = l.q1 * (l.q1 + 1) / 2;
        let glb_w = l.q2 * (l.q2 + 1) / 2;
        let width = l.fixed_len() + glu_w + glb_w;
        let oglu = l.fixed_len();
        let oglb = oglu + glu_w;
        let mut scratch = if want_grad { vec![0.0; n * width] } else { Vec::new() };
        let mut values = vec![0.0; n];

        let ob1 = l.beta1().start;
        let ob2 = l.beta2().start;
        let oxi1 = l.xi1().start;
        let oxi2 = l.xi2().start;
        let oa1 = l.alpha1();
        let oa2 = l.alpha2();
        let oh = l.log_h().start;
        let osu = l.log_sigma_u().start;
        let osb = l.log_sigma_b().start;

        let mut u = vec![0.0; l.q1];
        let mut bv = vec![0.0; l.q2];
        let mut gu = vec![0.0; l.q1];
        let mut gb = vec![0.0; l.q2];

        for i in 0..n {
            let ur = l.u_tilde(i);
            let br = l.b_tilde(i);
            let ut = &w[ur.clone()];
            let bt = &w[br.clone()];
            mat_vec_lower(&up.a_u, ut, &mut u);
            mat_vec_lower(&up.a_b, bt, &mut bv);
            gu.fill(0.0);
            gb.fill(0.0);
            // Whitened-effects prior (standard normal by construction; the
            // scale/correlation dependence enters through the data terms and
            // cancels against the transform Jacobian).
            let mut ll = -0.5 * (dot(ut, ut) + dot(bt, bt))
                - 0.5 * (l.q1 + l.q2) as f64 * ln2pi;

            let mut gr = if want_grad {
                Some(&mut scratch[i * width..(i + 1) * width])
            } else {
                None
            };

            for rix in self.row_range[i].clone() {
                let e = self.eval_row(rix, &th, &u, &bv, r, ln_r, tab.as_ref());
                ll += e.ll;
                if let Some(gr) = gr.as_deref_mut() {
                    for j in 0..l.p1 {
                        gr[ob1 + j] += e.d_eta_l * self.x1.get(rix, j);
                    }
                    for k in 0..l.q1 {
                        gu[k] += e.d_eta_l * self.z1.get(rix, k);
                    }
                    for j in 0..l.p2 {
                        gr[ob2 + j] += e.d_eta_z * self.x2.get(rix, j);
                    }
                    for k in 0..l.q2 {
                        gb[k] += e.d_eta_z * self.z2.get(rix, k);
                    }
                    if let Some(orr) = l.log_r() {
                        gr[orr] += e.d_r;
                    }
                }
            }

            let c = c_w[i];
            let so = {
                let gh = gr.as_deref_mut().map(|g| &mut g[oh..oh + l.n_seg]);
                self.surv_eval(i, &th, &u, &bv, c, gh)
            };
            ll += so.ll;

            if let Some(gr) = gr.as_deref_mut() {
                let a1 = th.alpha1;
                let a2 = th.alpha2;
                for j in 0..l.p1 {
                    gr[ob1 + j] += so.g_a * a1 * self.x1_base.get(i, j);
                }
                if let Some(jt) = self.x1_t {
                    gr[ob1 + jt] += so.g_b * a1;
                }
                for j in 0..l.p2 {
                    gr[ob2 + j] += so.g_a * a2 * self.x2_base.get(i, j);
                }
                if let Some(jt) = self.x2_t {
                    gr[ob2 + jt] += so.g_b * a2;
                }
                for k in 0..l.q1 {
                    gu[k] += so.g_a * a1 * self.z1_base.get(i, k);
                }
                if let Some(kt) = self.z1_t {
                    gu[kt] += so.g_b * a1;
                }
                for k in 0..l.q2 {
                    gb[k] += so.g_a * a2 * self.z2_base.get(i, k);
                }
                if let Some(kt) = self.z2_t {
                    gb[kt] += so.g_b * a2;
                }
                gr[oa1] += so.g_a * so.a_l + so.g_b * so.b_l;
                gr[oa2] += so.g_a * so.a_z + so.g_b * so.b_z;
                for j in 0..l.r2 {
                    gr[oxi2 + j] += so.g_a * self.w2.get(i, j);
                }
                if !self.no_cure {
                    for j in 0..l.r1 {
                        gr[oxi1 + j] += so.g_xc * self.w1.get(i, j);
                    }
                }
                // Chain the effect adjoints into scales, factor entries and
                // the subject's own whitened coordinates.
                for k in 0..l.q1 {
                    gr[osu + k] += gu[k] * u[k];
                    for m in 0..=k {
                        gr[oglu + k * (k + 1) / 2 + m] += gu[k] * up.sigma_u[k] * ut[m];
                    }
                }
                for k in 0..l.q2 {
                    gr[osb + k] += gb[k] * bv[k];
                    for m in 0..=k {
                        gr[oglb + k * (k + 1) / 2 + m] += gb[k] * up.sigma_b[k] * bt[m];
                    }
                }
                let g = grad.as_deref_mut().expect("gradient present");
                for m in 0..l.q1 {
                    let mut s_acc = 0.0;
                    for k in m..l.q1 {
                        s_acc += gu[k] * up.a_u.get(k, m);
                    }
                    g[ur.start + m] += s_acc - ut[m];
                }
                for m in 0..l.q2 {
                    let mut s_acc = 0.0;
                    for k in m..l.q2 {
                        s_acc += gb[k] * up.a_b.get(k, m);
                    }
                    g[br.start + m] += s_acc - bt[m];
                }
            }
            values[i] = ll;
        }

        let data_total = tree_sum_in_place(&mut values);
        if let Some(g) = grad.as_deref_mut() {
            if n > 0 {
                tree_reduce_rows(&mut scratch, n, width);
                for (j, gj) in g.iter_mut().enumerate().take(l.fixed_len()) {
                    *gj += scratch[j];
                }
                if let Some(orr) = l.log_r() {
                    // The rows accumulated d/dr; chain onto the log scale.
                    g[orr] *= up.r;
                }
                for (zs, q, zr, og) in [
                    (&up.z_u, l.q1, l.cpc_u(), oglu),
                    (&up.z_b, l.q2, l.cpc_b(), oglb),
                ] {
                    if q < 2 {
                        continue;
                    }
                    let mut glm = Matrix::zeros(q, q);
                    for k in 0..q {
                        for m in 0..=k {
                            glm.set(k, m, scratch[og + k * (k + 1) / 2 + m]);
                        }
                    }
                    let mut gz = vec![0.0; q * (q - 1) / 2];
                    vine_backprop(zs, q, &glm, &mut gz);
                    for (jj, &v) in gz.iter().enumerate() {
                        g[zr.start + jj] += v * (1.0 - zs[jj] * zs[jj]);
                    }
                }
            }
        }

        let prior_total = self.prior_terms(&up, w, grad.as_deref_mut());
        let total = data_total + prior_total;
        if total == f64::NEG_INFINITY {
            return Ok(total);
        }
        if !total.is_finite() {
            return Err(HjmError::Numeric {
                coord: None,
                msg: "joint log-density evaluated to NaN".into(),
            });
        }
        if let Some(g) = grad.as_deref_mut() {
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(HjmError::Numeric {
                    coord: Some(bad),
                    msg: format!("non-finite gradient component at coordinate {bad}"),
                });
            }
        }
        Ok(total)
    }

    /// Prior density plus transform Jacobian of the fixed block, directly in
    /// unconstrained coordinates (the whitened-effects prior lives in the
    /// subject loop).
    fn prior_terms(&self, up: &Unpacked, w: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let l = &self.layout;
        let p = &self.priors;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut total = 0.0;

        for (range, sd) in [
            (l.beta1(), p.beta_sd),
            (l.beta2(), p.beta_sd),
            (l.xi1(), p.xi_sd),
            (l.xi2(), p.xi_sd),
            (l.alpha1()..l.alpha1() + 1, p.alpha_sd),
            (l.alpha2()..l.alpha2() + 1, p.alpha_sd),
        ] {
            for j in range {
                let x = w[j];
                total += -0.5 * ln2pi - sd.ln() - 0.5 * (x / sd) * (x / sd);
                if let Some(g) = grad.as_deref_mut() {
                    g[j] += -x / (sd * sd);
                }
            }
        }
        for (q, j) in l.log_h().enumerate() {
            let h = up.h[q];
            total += p.h_shape * p.h_rate.ln() - ln_gamma(p.h_shape) + p.h_shape * w[j]
                - p.h_rate * h;
            if let Some(g) = grad.as_deref_mut() {
                g[j] += p.h_shape - p.h_rate * h;
            }
        }
        if let Some(j) = l.log_r() {
            total += p.r_shape * p.r_rate.ln() - ln_gamma(p.r_shape) + p.r_shape * w[j]
                - p.r_rate * up.r;
            if let Some(g) = grad.as_deref_mut() {
                g[j] += p.r_shape - p.r_rate * up.r;
            }
        }
        for (srange, sigmas) in
            [(l.log_sigma_u(), &up.sigma_u), (l.log_sigma_b(), &up.sigma_b)]
        {
            let gam = p.sigma_scale;
            for (k, j) in srange.enumerate() {
                let s = sigmas[k];
                total += std::f64::consts::LN_2 - std::f64::consts::PI.ln() - gam.ln()
                    - (s * s / (gam * gam)).ln_1p()
                    + w[j];
                if let Some(g) = grad.as_deref_mut() {
                    g[j] += 1.0 - 2.0 * s * s / (gam * gam + s * s);
                }
            }
        }
        for (zrange, zs, q) in
            [(l.cpc_u(), &up.z_u, l.q1), (l.cpc_b(), &up.z_b, l.q2)]
        {
            let mut idx = 0;
            for i in 1..q {
                for j in 0..i {
                    let b = p.lkj_eta + (q as f64 - 2.0 - j as f64) / 2.0;
                    let z = zs[idx];
                    total += lkj_cpc_logpdf(z, b) + (1.0 - z * z).ln();
                    if let Some(g) = grad.as_deref_mut() {
                        g[zrange.start + idx] += -2.0 * b * z;
                    }
                    idx += 1;
                }
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cure::{self, LinPred};
    use crate::data::{build_dataset, BaselineSpec, DesignCol, DesignInfo, ModelSpec, RawTables};
    use crate::sim::{simulate, SimScenario};
    use crate::util::stream_rng;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn make_instance(
        n: usize,
        family: Family,
        no_cure: bool,
        seed: u64,
    ) -> (Posterior, JointDataset, ModelSpec, Vec<u8>) {
        let mut sc = SimScenario::preset("table2", n).expect("preset");
        sc.family = family;
        let out = simulate(&sc, seed).expect("simulate");
        let mut spec = ModelSpec::default_simulation(family);
        spec.no_cure = no_cure;
        let ds = build_dataset(&spec, &out.raw).expect("dataset");
        let cure: Vec<u8> = ds
            .survival
            .iter()
            .enumerate()
            .map(|(i, s)| u8::from(s.status == 1 || no_cure || i % 2 == 0))
            .collect();
        let post = Posterior::new(&ds, &spec).expect("posterior");
        (post, ds, spec, cure)
    }

    fn random_w(dim: usize, rng: &mut impl Rng, scale: f64) -> Vec<f64> {
        (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect()
    }

    // -- layout ---------------------------------------------------------------

    #[test]
    fn layout_tiles_the_vector_without_gaps() {
        let (post, _, _, _) = make_instance(3, Family::Zinb, false, 11);
        let l = &post.layout;
        assert_eq!((l.p1, l.p2, l.r1, l.r2, l.q1, l.q2), (4, 3, 2, 2, 2, 1));
        let names = l.names();
        assert_eq!(names.len(), l.fixed_len());
        assert_eq!(names[0], "beta1[0]");
        assert_eq!(names[l.alpha1()], "alpha1");
        assert_eq!(names[l.log_r().expect("dispersion slot")], "r");
        assert_eq!(names[l.cpc_u().start], "cpc_u[1,0]");
        assert_eq!(l.n_cpc_b(), 0);
        let mut next = l.fixed_len();
        for i in 0..3 {
            assert_eq!(l.u_tilde(i).start, next);
            assert_eq!(l.b_tilde(i).start, next + l.q1);
            next += l.latent_stride();
        }
        assert_eq!(l.dim(), next);

        let (post_zip, _, _, _) = make_instance(3, Family::Zip, false, 11);
        assert!(post_zip.layout.log_r().is_none());
        assert_eq!(post_zip.layout.fixed_len() + 1, l.fixed_len());
    }

    #[test]
    fn flatten_and_from_flat_are_inverse_and_aligned_with_names() {
        let (post, _, _, _) = make_instance(2, Family::Zinb, false, 4);
        let l = &post.layout;
        let mut rng = stream_rng(3, 0);
        let w = random_w(post.dim(), &mut rng, 0.5);
        let (theta, _, _) = post.from_unconstrained(&w);
        let flat = theta.flatten(l);
        assert_eq!(flat.len(), l.fixed_len());
        let names = l.names();
        let at = |n: &str| flat[names.iter().position(|x| x == n).expect("name")];
        assert_eq!(at("r"), theta.r.expect("dispersion"));
        assert_eq!(at("alpha2"), theta.alpha2);
        assert_eq!(at("sigma_u[1]"), theta.sigma_u[1]);
        assert_eq!(at("cpc_u[1,0]"), theta.cpc_u[0]);
        assert_eq!(ParamVector::from_flat(l, &flat), theta);
    }

    // -- vine transform -------------------------------------------------------

    #[test]
    fn vine_rows_have_unit_norm_and_known_determinant() {
        let z = [0.3, -0.2, 0.5];
        let l = vine_chol(&z, 3);
        for i in 0..3 {
            let norm: f64 = (0..3).map(|j| l.get(i, j) * l.get(i, j)).sum();
            assert_relative_eq!(norm, 1.0, max_relative = 1e-14);
        }
        // det(R) = prod of squared diagonals = prod (1 - z_ij^2)
        let det: f64 = (0..3).map(|i| l.get(i, i) * l.get(i, i)).product();
        let expect: f64 = z.iter().map(|&v| 1.0 - v * v).product();
        assert_relative_eq!(det, expect, max_relative = 1e-13);
        // zero partial correlations give the identity factor
        let id = vine_chol(&[0.0; 3], 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(id.get(i, j), f64::from(u8::from(i == j)));
            }
        }
    }

    #[test]
    fn derived_covariances_match_hand_values() {
        let theta = ParamVector {
            beta1: vec![],
            beta2: vec![],
            xi1: vec![],
            xi2: vec![],
            alpha1: 0.0,
            alpha2: 0.0,
            h_star: vec![],
            r: None,
            sigma_u: vec![2.0, 0.5],
            cpc_u: vec![0.6],
            sigma_b: vec![1.5],
            cpc_b: vec![],
        };
        let d: std::collections::HashMap<String, f64> = theta.derived().into_iter().collect();
        assert_relative_eq!(d["d_u[0,0]"], 4.0, max_relative = 1e-14);
        assert_relative_eq!(d["d_u[1,0]"], 2.0 * 0.5 * 0.6, max_relative = 1e-14);
        assert_relative_eq!(d["d_u[1,1]"], 0.25, max_relative = 1e-14);
        assert_relative_eq!(d["rho_u[1,0]"], 0.6, max_relative = 1e-14);
        assert_relative_eq!(d["d_b[0,0]"], 2.25, max_relative = 1e-14);
        let cov = theta.cov_u();
        assert_relative_eq!(cov.get(0, 1), cov.get(1, 0), max_relative = 1e-15);
    }

    // -- correlation prior ----------------------------------------------------

    #[test]
    fn partial_correlation_prior_matches_numeric_normalization() {
        // For a 2x2 block the partial correlation is the correlation and the
        // prior shape is (1 - z^2)^{eta - 1}; normalize it numerically.
        let eta = 2.0;
        let f = |z: f64| (1.0 - z * z).powf(eta - 1.0);
        let m = 20_000;
        let h = 2.0 / m as f64;
        let mut s = f(-1.0) + f(1.0);
        for k in 1..m {
            s += f(-1.0 + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let norm = s * h / 3.0;
        assert_relative_eq!(norm, 4.0 / 3.0, max_relative = 1e-9);
        for &z in &[0.0, 0.35, -0.8] {
            assert_relative_eq!(
                lkj_cpc_logpdf(z, eta).exp(),
                f(z) / norm,
                max_relative = 1e-8
            );
        }
        // Frozen: at the identity the shape-2 density is exactly 3/4.
        assert_relative_eq!(lkj_cpc_logpdf(0.0, 2.0).exp(), 0.75, max_relative = 1e-12);
    }

    #[test]
    fn partial_correlation_prior_integrates_to_one_at_off_level_shapes() {
        // Level-0 shape of a 3x3 block with eta = 2: b = 2.5.
        let b = 2.5;
        let m = 40_000;
        let h = 2.0 / m as f64;
        let mut s = 0.0;
        for k in 1..m {
            s += lkj_cpc_logpdf(-1.0 + k as f64 * h, b).exp()
                * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert_relative_eq!(s * h / 3.0, 1.0, max_relative = 1e-6);
    }

    // -- representation changes ----------------------------------------------

    #[test]
    fn unconstrained_round_trip_is_tight() {
        let (post, _, _, _) = make_instance(4, Family::Zinb, false, 5);
        let mut rng = stream_rng(1, 9);
        for _ in 0..50 {
            let w = random_w(post.dim(), &mut rng, 0.7);
            let (theta, u, b) = post.from_unconstrained(&w);
            let back = post.to_unconstrained(&theta, &u, &b).expect("in support");
            for (a, b2) in w.iter().zip(&back) {
                assert_relative_eq!(*a, *b2, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn constrained_round_trip_recovers_named_parameters() {
        let (post, _, _, _) = make_instance(3, Family::Zinb, false, 6);
        let l = post.layout.clone();
        let theta = ParamVector {
            beta1: vec![0.5, -0.25, 1.0, 0.0],
            beta2: vec![-2.0, 0.3, 0.7],
            xi1: vec![-1.0, -1.0],
            xi2: vec![-0.5, 0.25],
            alpha1: -1.0,
            alpha2: 1.0,
            h_star: vec![1.4],
            r: Some(2.0),
            sigma_u: vec![1.0, 0.8],
            cpc_u: vec![0.5],
            sigma_b: vec![1.2],
            cpc_b: vec![],
        };
        let mut rng = stream_rng(2, 7);
        let u = Matrix::from_fn(3, l.q1, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.6 * z
        });
        let b = Matrix::from_fn(3, l.q2, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.6 * z
        });
        let w = post.to_unconstrained(&theta, &u, &b).expect("in support");
        let (theta2, u2, b2) = post.from_unconstrained(&w);
        assert_relative_eq!(theta2.r.expect("dispersion"), 2.0, max_relative = 1e-14);
        assert_relative_eq!(theta2.cpc_u[0], 0.5, max_relative = 1e-13);
        for (a, c) in theta.flatten(&l).iter().zip(&theta2.flatten(&l)) {
            assert_relative_eq!(*a, *c, epsilon = 1e-13, max_relative = 1e-12);
        }
        for i in 0..3 {
            for k in 0..l.q1 {
                assert_relative_eq!(u.get(i, k), u2.get(i, k), epsilon = 1e-13);
            }
            for k in 0..l.q2 {
                assert_relative_eq!(b.get(i, k), b2.get(i, k), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn out_of_support_parameters_are_rejected() {
        let (post, _, _, _) = make_instance(2, Family::Zinb, false, 6);
        let mut rng = stream_rng(2, 8);
        let w = random_w(post.dim(), &mut rng, 0.3);
        let (mut theta, u, b) = post.from_unconstrained(&w);
        theta.sigma_u[0] = -1.0;
        assert!(matches!(
            post.to_unconstrained(&theta, &u, &b),
            Err(HjmError::Domain(_))
        ));
        let (mut theta, u, b) = post.from_unconstrained(&w);
        theta.r = None;
        assert!(post.to_unconstrained(&theta, &u, &b).is_err());
        let (mut theta, _, _) = post.from_unconstrained(&w);
        theta.h_star[0] = 0.0;
        assert_eq!(post.log_prior(&theta), f64::NEG_INFINITY);
        let (mut theta, _, _) = post.from_unconstrained(&w);
        theta.cpc_u[0] = 1.0;
        assert_eq!(post.log_prior(&theta), f64::NEG_INFINITY);
    }

    #[test]
    fn log_jacobian_shifts_exactly_with_the_dispersion_coordinate() {
        let (post, _, _, _) = make_instance(3, Family::Zinb, false, 8);
        let mut rng = stream_rng(4, 2);
        let w = random_w(post.dim(), &mut rng, 0.5);
        let j = post.layout.log_r().expect("dispersion slot");
        let mut w2 = w.clone();
        w2[j] += 0.37;
        assert_relative_eq!(
            post.log_jacobian(&w2) - post.log_jacobian(&w),
            0.37,
            epsilon = 1e-12
        );
    }

    // -- reductions and identities -------------------------------------------

    #[test]
    fn empty_dataset_reduces_to_the_prior() {
        let spec = ModelSpec::default_simulation(Family::Zinb);
        let raw = RawTables {
            long_covar_names: vec!["x1".into(), "x2".into()],
            long_rows: vec![],
            surv_covar_names: vec!["w1".into(), "w2".into()],
            surv_rows: vec![],
        };
        let ds = build_dataset(&spec, &raw).expect("empty dataset");
        assert_eq!(ds.n_subjects(), 0);
        let post = Posterior::new(&ds, &spec).expect("posterior");
        let mut rng = stream_rng(9, 1);
        let w = random_w(post.dim(), &mut rng, 0.5);
        let ld = post.log_density(&w, &[]).expect("value");
        let (theta, u, b) = post.from_unconstrained(&w);
        let lj = post.log_joint(&theta, &u, &b, &[]).expect("joint");
        assert_relative_eq!(ld, lj + post.log_jacobian(&w), epsilon = 1e-10);
        // With no data the coefficient score is exactly the prior score.
        let mut g = vec![0.0; post.dim()];
        post.log_density_grad(&w, &[], &mut g).expect("gradient");
        for jj in post.layout.beta1() {
            assert_relative_eq!(g[jj], -w[jj] / 100.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn unconstrained_target_is_joint_plus_jacobian() {
        let (post, _, _, cure) = make_instance(8, Family::Zinb, false, 77);
        let mut rng = stream_rng(5, 3);
        for _ in 0..20 {
            let w = random_w(post.dim(), &mut rng, 0.5);
            let ld = post.log_density(&w, &cure).expect("value");
            let (theta, u, b) = post.from_unconstrained(&w);
            let lj = post.log_joint(&theta, &u, &b, &cure).expect("joint");
            assert_relative_eq!(ld, lj + post.log_jacobian(&w), max_relative = 1e-10, epsilon = 1e-9);
        }
    }

    #[test]
    fn no_cure_reduction_differs_by_the_incidence_mass_only() {
        let n = 8;
        let sc = SimScenario::preset("table2", n).expect("preset");
        let out = simulate(&sc, 31).expect("simulate");
        let spec_cure = ModelSpec::default_simulation(Family::Zinb);
        let mut spec_nc = spec_cure.clone();
        spec_nc.no_cure = true;
        let ds = build_dataset(&spec_cure, &out.raw).expect("dataset");
        let ds_nc = build_dataset(&spec_nc, &out.raw).expect("dataset");
        let post = Posterior::new(&ds, &spec_cure).expect("posterior");
        let post_nc = Posterior::new(&ds_nc, &spec_nc).expect("posterior");
        assert_eq!(post.dim(), post_nc.dim());
        let cure = vec![1u8; n];
        let mut rng = stream_rng(6, 4);
        let w = random_w(post.dim(), &mut rng, 0.4);
        let a = post.log_density(&w, &cure).expect("value");
        let b = post_nc.log_density(&w, &cure).expect("value");
        let l = &post.layout;
        let xi1 = &w[l.xi1()];
        let mut shift = 0.0;
        for i in 0..n {
            shift += log_expit(-dot(post.w1.row(i), xi1));
        }
        assert_relative_eq!(a - b, shift, epsilon = 1e-10, max_relative = 1e-10);
        // Gradients agree everywhere except the incidence block.
        let mut ga = vec![0.0; post.dim()];
        let mut gb = vec![0.0; post.dim()];
        post.log_density_grad(&w, &cure, &mut ga).expect("gradient");
        post_nc.log_density_grad(&w, &cure, &mut gb).expect("gradient");
        for j in 0..post.dim() {
            if !l.xi1().contains(&j) {
                assert_relative_eq!(ga[j], gb[j], epsilon = 1e-10, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn one_subjects_data_changes_only_its_own_contribution() {
        let sc = SimScenario::preset("table2", 6).expect("preset");
        let out = simulate(&sc, 99).expect("simulate");
        let mut spec = ModelSpec::default_simulation(Family::Zinb);
        spec.baseline = BaselineSpec::Knots(vec![5.0]);
        let ds_a = build_dataset(&spec, &out.raw).expect("dataset");
        let target_id = ds_a.ids[3].clone();
        let mut raw_b = out.raw.clone();
        let pos = raw_b
            .long_rows
            .iter()
            .position(|r| r.0 == target_id && r.2.is_some())
            .expect("an observed count");
        raw_b.long_rows[pos].2 = Some(raw_b.long_rows[pos].2.expect("count") + 3);
        let ds_b = build_dataset(&spec, &raw_b).expect("dataset");

        let single = |raw: &RawTables| RawTables {
            long_covar_names: raw.long_covar_names.clone(),
            long_rows: raw.long_rows.iter().filter(|r| r.0 == target_id).cloned().collect(),
            surv_covar_names: raw.surv_covar_names.clone(),
            surv_rows: raw.surv_rows.iter().filter(|r| r.0 == target_id).cloned().collect(),
        };
        let ds_sa = build_dataset(&spec, &single(&out.raw)).expect("dataset");
        let ds_sb = build_dataset(&spec, &single(&raw_b)).expect("dataset");

        let post_a = Posterior::new(&ds_a, &spec).expect("posterior");
        let post_b = Posterior::new(&ds_b, &spec).expect("posterior");
        let post_sa = Posterior::new(&ds_sa, &spec).expect("posterior");
        let post_sb = Posterior::new(&ds_sb, &spec).expect("posterior");

        let mut rng = stream_rng(7, 5);
        let w = random_w(post_a.dim(), &mut rng, 0.4);
        let l = &post_a.layout;
        let ls = &post_sa.layout;
        let mut ws = vec![0.0; post_sa.dim()];
        ws[..ls.fixed_len()].copy_from_slice(&w[..l.fixed_len()]);
        ws[ls.u_tilde(0)].copy_from_slice(&w[l.u_tilde(3)]);
        ws[ls.b_tilde(0)].copy_from_slice(&w[l.b_tilde(3)]);

        let cure = vec![1u8; 6];
        let d_full = post_b.log_density(&w, &cure).expect("value")
            - post_a.log_density(&w, &cure).expect("value");
        let d_single = post_sb.log_density(&ws, &[1]).expect("value")
            - post_sa.log_density(&ws, &[1]).expect("value");
        assert_relative_eq!(d_full, d_single, epsilon = 1e-8, max_relative = 1e-8);
    }

    // -- weight validation ----------------------------------------------------

    #[test]
    fn event_subjects_cannot_be_marked_cured() {
        let (post, ds, _, mut cure) = make_instance(20, Family::Zinb, false, 3);
        let ev = ds
            .survival
            .iter()
            .position(|s| s.status == 1)
            .expect("at least one event in 20 subjects");
        cure[ev] = 0;
        let w = vec![0.1; post.dim()];
        assert!(matches!(
            post.log_density(&w, &cure),
            Err(HjmError::Consistency(_))
        ));
    }

    #[test]
    fn fractional_weights_are_validated() {
        let (post, _, _, _) = make_instance(4, Family::Zinb, false, 3);
        let w = vec![0.1; post.dim()];
        let bad = vec![0.5, 1.5, 1.0, 1.0];
        assert!(matches!(
            post.log_density_weighted(&w, &bad),
            Err(HjmError::Domain(_))
        ));
        let (post_nc, _, _, _) = make_instance(4, Family::Zinb, true, 3);
        let c = vec![1.0, 0.0, 1.0, 1.0];
        assert!(matches!(
            post_nc.log_density_weighted(&vec![0.1; post_nc.dim()], &c),
            Err(HjmError::Consistency(_))
        ));
    }

    #[test]
    fn fractional_weights_interpolate_the_hard_indicators() {
        // The target is linear in each susceptibility weight, so a fractional
        // weight must land exactly between the two hard evaluations.
        let (post, ds, _, _) = make_instance(6, Family::Zinb, false, 13);
        let cens = ds.survival.iter().position(|s| s.status == 0).expect("a censored subject");
        let mut rng = stream_rng(8, 6);
        let w = random_w(post.dim(), &mut rng, 0.4);
        let mut c_sus = vec![1.0; 6];
        let mut c_cured = vec![1.0; 6];
        c_cured[cens] = 0.0;
        let mut c_mix = vec![1.0; 6];
        c_mix[cens] = 0.3;
        for v in [&mut c_sus, &mut c_cured, &mut c_mix] {
            for (i, s) in ds.survival.iter().enumerate() {
                if s.status == 1 {
                    v[i] = 1.0;
                }
            }
        }
        let f1 = post.log_density_weighted(&w, &c_sus).expect("value");
        let f0 = post.log_density_weighted(&w, &c_cured).expect("value");
        let fm = post.log_density_weighted(&w, &c_mix).expect("value");
        assert_relative_eq!(fm, 0.3 * f1 + 0.7 * f0, max_relative = 1e-12, epsilon = 1e-10);
    }

    #[test]
    fn marginal_logliks_sum_the_hard_indicator_densities() {
        // Summing the susceptibility indicator out of the joint density must
        // equal log(exp(ll | susceptible) + exp(ll | cured)) per censored
        // subject, and leave event subjects at their susceptible value.
        let (post, ds, _, _) = make_instance(8, Family::Zip, false, 29);
        let mut rng = stream_rng(9, 2);
        let w = random_w(post.dim(), &mut rng, 0.4);
        let (theta, u, b) = post.from_unconstrained(&w);
        let marg = post.subject_logliks_marginal(&theta, &u, &b).expect("marginal");
        let sus = post.subject_logliks(&theta, &u, &b, &vec![1u8; 8]).expect("susceptible");
        for (i, s) in ds.survival.iter().enumerate() {
            if s.status == 1 {
                assert_relative_eq!(marg[i], sus[i], max_relative = 1e-12);
            } else {
                let mut c = vec![1u8; 8];
                c[i] = 0;
                let cured = post.subject_logliks(&theta, &u, &b, &c).expect("cured");
                assert_relative_eq!(
                    marg[i],
                    crate::util::log_add_exp(sus[i], cured[i]),
                    max_relative = 1e-12
                );
            }
        }

        // Under the no-cure reduction the mixture collapses entirely.
        let (post_nc, _, _, _) = make_instance(8, Family::Zip, true, 29);
        let w_nc = random_w(post_nc.dim(), &mut rng, 0.4);
        let (theta, u, b) = post_nc.from_unconstrained(&w_nc);
        let marg = post_nc.subject_logliks_marginal(&theta, &u, &b).expect("marginal");
        let hard = post_nc.subject_logliks(&theta, &u, &b, &vec![1u8; 8]).expect("hard");
        for i in 0..8 {
            assert_relative_eq!(marg[i], hard[i], max_relative = 1e-12);
        }
    }

    // -- gradients ------------------------------------------------------------

    fn fd_assert(post: &Posterior, cure: &[u8], w: &[f64]) {
        let c_w: Vec<f64> = cure.iter().map(|&c| c as f64).collect();
        let mut g = vec![0.0; post.dim()];
        let f0 = post.log_density_grad(w, cure, &mut g).expect("gradient");
        assert!(f0.is_finite());
        let h = 1e-5;
        for j in 0..post.dim() {
            let mut wp = w.to_vec();
            wp[j] += h;
            let mut wm = w.to_vec();
            wm[j] -= h;
            let fp = post.log_density_weighted(&wp, &c_w).expect("value");
            let fm = post.log_density_weighted(&wm, &c_w).expect("value");
            let fd = (fp - fm) / (2.0 * h);
            let tol = 1e-8 + 1e-6 * g[j].abs().max(fd.abs()).max(1.0);
            assert!(
                (fd - g[j]).abs() <= tol,
                "coordinate {j}: analytic {} vs finite difference {}",
                g[j],
                fd
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_negative_binomial() {
        let (post, _, _, cure) = make_instance(10, Family::Zinb, false, 42);
        let mut rng = stream_rng(10, 1);
        for _ in 0..10 {
            let w = random_w(post.dim(), &mut rng, 0.4);
            fd_assert(&post, &cure, &w);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_poisson() {
        let (post, _, _, cure) = make_instance(10, Family::Zip, false, 43);
        let mut rng = stream_rng(10, 2);
        for _ in 0..5 {
            let w = random_w(post.dim(), &mut rng, 0.4);
            fd_assert(&post, &cure, &w);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_no_cure() {
        let (post, _, _, cure) = make_instance(10, Family::Zinb, true, 44);
        let mut rng = stream_rng(10, 3);
        for _ in 0..5 {
            let w = random_w(post.dim(), &mut rng, 0.4);
            fd_assert(&post, &cure, &w);
        }
    }

    /// Three correlated count effects and a two-segment baseline: exercises
    /// the off-level vine chains and multi-segment hazard adjoints.
    fn wide_effects_instance() -> (Posterior, Vec<u8>) {
        let c = |s: &str| DesignCol::Covar(s.to_string());
        let spec = ModelSpec {
            family: Family::Zinb,
            design: DesignInfo {
                x1: vec![DesignCol::Intercept, DesignCol::Time, c("x1")],
                z1: vec![DesignCol::Intercept, DesignCol::Time, c("x1")],
                x2: vec![DesignCol::Intercept],
                z2: vec![DesignCol::Intercept],
                w1: vec![DesignCol::Intercept],
                w2: vec![c("w2")],
            },
            baseline: BaselineSpec::Knots(vec![1.5, 6.0]),
            priors: Priors::default(),
            no_cure: false,
        };
        let raw = RawTables {
            long_covar_names: vec!["x1".into()],
            long_rows: vec![
                ("1".into(), 0.0, Some(2), vec![0.3]),
                ("1".into(), 1.0, Some(0), vec![0.3]),
                ("2".into(), 0.0, Some(5), vec![-0.6]),
                ("2".into(), 0.8, Some(1), vec![-0.6]),
                ("2".into(), 2.0, Some(0), vec![-0.6]),
                ("3".into(), 0.0, Some(0), vec![1.1]),
            ],
            surv_covar_names: vec!["w2".into()],
            surv_rows: vec![
                ("1".into(), 1.2, 1, vec![0.4]),
                ("2".into(), 2.5, 0, vec![-1.0]),
                ("3".into(), 0.7, 0, vec![0.2]),
            ],
        };
        let ds = build_dataset(&spec, &raw).expect("dataset");
        let post = Posterior::new(&ds, &spec).expect("posterior");
        (post, vec![1, 0, 1])
    }

    #[test]
    fn gradient_matches_finite_differences_wide_effects() {
        let (post, cure) = wide_effects_instance();
        assert_eq!(post.layout.n_cpc_u(), 3);
        assert_eq!(post.layout.n_seg, 2);
        let mut rng = stream_rng(10, 4);
        for _ in 0..5 {
            let w = random_w(post.dim(), &mut rng, 0.4);
            fd_assert(&post, &cure, &w);
        }
    }

    // -- brute-force joint density -------------------------------------------

    const GL15_NODES: [f64; 8] = [
        0.0,
        0.2011940939974345,
        0.3941513470775634,
        0.5709721726085388,
        0.7244177313601701,
        0.8482065834104272,
        0.9372733924007060,
        0.9879925180204854,
    ];
    const GL15_WEIGHTS: [f64; 8] = [
        0.2025782419255613,
        0.1984314853271116,
        0.1861610000155622,
        0.1662692058169939,
        0.1395706779261543,
        0.1071592204671719,
        0.0703660474881081,
        0.0307532419961173,
    ];

    fn gl15(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let mut total = GL15_WEIGHTS[0] * f(c);
        for i in 1..8 {
            total += GL15_WEIGHTS[i] * (f(c + h * GL15_NODES[i]) + f(c - h * GL15_NODES[i]));
        }
        total * h
    }

    fn ln_mvn_brute(x: &[f64], d: &Matrix) -> f64 {
        use statrs::distribution::{Continuous, Normal};
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        match x.len() {
            1 => Normal::new(0.0, d.get(0, 0).sqrt()).expect("sd").ln_pdf(x[0]),
            2 => {
                let (a, b, c) = (d.get(0, 0), d.get(0, 1), d.get(1, 1));
                let det = a * c - b * b;
                let q = (c * x[0] * x[0] - 2.0 * b * x[0] * x[1] + a * x[1] * x[1]) / det;
                -ln2pi - 0.5 * det.ln() - 0.5 * q
            }
            _ => unreachable!("brute oracle handles one or two dimensions"),
        }
    }

    /// Independent term-by-term joint density: textbook PMF formulas,
    /// quadrature cumulative hazard, library densities for every prior.
    fn brute_log_joint(
        ds: &JointDataset,
        spec: &ModelSpec,
        theta: &ParamVector,
        u: &Matrix,
        b: &Matrix,
        cure: &[u8],
    ) -> f64 {
        use statrs::distribution::{Beta, Cauchy, Continuous, Gamma, Normal};
        let p = &spec.priors;
        let mut total = 0.0;
        let nb = Normal::new(0.0, p.beta_sd).expect("prior sd");
        for &x in theta.beta1.iter().chain(&theta.beta2) {
            total += nb.ln_pdf(x);
        }
        let nx = Normal::new(0.0, p.xi_sd).expect("prior sd");
        for &x in theta.xi1.iter().chain(&theta.xi2) {
            total += nx.ln_pdf(x);
        }
        let na = Normal::new(0.0, p.alpha_sd).expect("prior sd");
        total += na.ln_pdf(theta.alpha1) + na.ln_pdf(theta.alpha2);
        let gh = Gamma::new(p.h_shape, p.h_rate).expect("prior shape");
        for &h in &theta.h_star {
            total += gh.ln_pdf(h);
        }
        if let Some(r) = theta.r {
            total += Gamma::new(p.r_shape, p.r_rate).expect("prior shape").ln_pdf(r);
        }
        let ca = Cauchy::new(0.0, p.sigma_scale).expect("prior scale");
        for &s in theta.sigma_u.iter().chain(&theta.sigma_b) {
            total += std::f64::consts::LN_2 + ca.ln_pdf(s);
        }
        for (cpc, q) in
            [(&theta.cpc_u, theta.sigma_u.len()), (&theta.cpc_b, theta.sigma_b.len())]
        {
            let mut idx = 0;
            for i in 1..q {
                for j in 0..i {
                    let shape = p.lkj_eta + (q as f64 - 2.0 - j as f64) / 2.0;
                    let z = cpc[idx];
                    idx += 1;
                    total += Beta::new(shape, shape).expect("prior shape").ln_pdf((z + 1.0) / 2.0)
                        - std::f64::consts::LN_2;
                }
            }
            assert_eq!(idx, cpc.len());
        }

        let du = theta.cov_u();
        let db = theta.cov_b();
        let knots = &ds.knots;
        for i in 0..ds.n_subjects() {
            total += ln_mvn_brute(u.row(i), &du) + ln_mvn_brute(b.row(i), &db);
            for rix in ds.row_range[i].clone() {
                let rec = &ds.longitudinal[rix];
                let eta_l =
                    dot(ds.covariates.x1.row(rix), &theta.beta1) + dot(ds.covariates.z1.row(rix), u.row(i));
                let eta_z =
                    dot(ds.covariates.x2.row(rix), &theta.beta2) + dot(ds.covariates.z2.row(rix), b.row(i));
                let pz = 1.0 / (1.0 + (-eta_z).exp());
                if rec.y == 0 {
                    total += pz.ln();
                } else {
                    let yf = rec.y as f64;
                    let lam = eta_l.exp();
                    total += (1.0 - pz).ln();
                    match spec.family {
                        Family::Zip => {
                            total += -lam + yf * lam.ln() - ln_gamma(yf + 1.0)
                                - (1.0 - (-lam).exp()).ln();
                        }
                        Family::Zinb => {
                            let r = theta.r.expect("dispersion");
                            let kappa = r / (r + lam);
                            total += ln_gamma(yf + r) - ln_gamma(r) - ln_gamma(yf + 1.0)
                                + r * kappa.ln()
                                + yf * (1.0 - kappa).ln()
                                - (1.0 - kappa.powf(r)).ln();
                        }
                    }
                }
            }
            let srec = &ds.survival[i];
            let x1b = ds.covariates.x1_base.row(i);
            let z1b = ds.covariates.z1_base.row(i);
            let x2b = ds.covariates.x2_base.row(i);
            let z2b = ds.covariates.z2_base.row(i);
            let a_l = dot(x1b, &theta.beta1) + dot(z1b, u.row(i));
            let b_l = ds.design.x1_time().map_or(0.0, |j| theta.beta1[j])
                + ds.design.z1_time().map_or(0.0, |j| u.get(i, j));
            let a_z = dot(x2b, &theta.beta2) + dot(z2b, b.row(i));
            let b_z = ds.design.x2_time().map_or(0.0, |j| theta.beta2[j])
                + ds.design.z2_time().map_or(0.0, |j| b.get(i, j));
            let ga = dot(ds.covariates.w2.row(i), &theta.xi2)
                + theta.alpha1 * a_l
                + theta.alpha2 * a_z;
            let gb = theta.alpha1 * b_l + theta.alpha2 * b_z;
            let t = srec.time;
            let mut big_h = 0.0;
            let mut lo = 0.0;
            for (q, &k) in knots.iter().enumerate() {
                let hi = k.min(t);
                if hi <= lo {
                    break;
                }
                big_h += theta.h_star[q] * gl15(|s| (ga + gb * s).exp(), lo, hi);
                lo = k;
            }
            let seg = knots.iter().position(|&k| t <= k).expect("inside grid");
            let event = srec.status == 1;
            let xc = dot(ds.covariates.w1.row(i), &theta.xi1);
            let pi_c = 1.0 / (1.0 + (-xc).exp());
            if spec.no_cure {
                total += if event { theta.h_star[seg].ln() + ga + gb * t } else { 0.0 } - big_h;
            } else if cure[i] == 1 {
                total += (1.0 - pi_c).ln()
                    + if event { theta.h_star[seg].ln() + ga + gb * t } else { 0.0 }
                    - big_h;
            } else {
                total += pi_c.ln();
            }
        }
        total
    }

    fn random_theta(l: &ParamLayout, rng: &mut impl Rng) -> ParamVector {
        let mut norm = |s: f64| {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        };
        let beta1 = (0..l.p1).map(|_| norm(0.3)).collect();
        let beta2 = (0..l.p2).map(|_| norm(0.3)).collect();
        let xi1 = (0..l.r1).map(|_| norm(0.3)).collect();
        let xi2 = (0..l.r2).map(|_| norm(0.3)).collect();
        let alpha1 = norm(0.3);
        let alpha2 = norm(0.3);
        let h_star = (0..l.n_seg).map(|_| norm(0.3).exp()).collect();
        let r = l.has_r.then(|| 1.5 * norm(0.3).exp());
        let sigma_u = (0..l.q1).map(|_| norm(0.3).exp()).collect();
        let sigma_b = (0..l.q2).map(|_| norm(0.3).exp()).collect();
        let mut unif = |lim: f64| lim * (2.0 * rng.gen::<f64>() - 1.0);
        let cpc_u = (0..l.n_cpc_u()).map(|_| unif(0.6)).collect();
        let cpc_b = (0..l.n_cpc_b()).map(|_| unif(0.6)).collect();
        ParamVector {
            beta1,
            beta2,
            xi1,
            xi2,
            alpha1,
            alpha2,
            h_star,
            r,
            sigma_u,
            cpc_u,
            sigma_b,
            cpc_b,
        }
    }

    #[test]
    fn log_joint_matches_brute_force_composition() {
        let (post, ds, spec, _) = make_instance(5, Family::Zinb, false, 17);
        let mut rng = stream_rng(11, 0);
        for _ in 0..60 {
            let theta = random_theta(&post.layout, &mut rng);
            let u = Matrix::from_fn(5, post.layout.q1, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * z
            });
            let b = Matrix::from_fn(5, post.layout.q2, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * z
            });
            let cure: Vec<u8> = ds
                .survival
                .iter()
                .map(|s| u8::from(s.status == 1 || rng.gen_bool(0.6)))
                .collect();
            let mine = post.log_joint(&theta, &u, &b, &cure).expect("joint");
            let brute = brute_log_joint(&ds, &spec, &theta, &u, &b, &cure);
            assert_relative_eq!(mine, brute, max_relative = 1e-10, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_joint_matches_brute_force_poisson_family() {
        let (post, ds, spec, _) = make_instance(5, Family::Zip, false, 19);
        let mut rng = stream_rng(11, 1);
        for _ in 0..40 {
            let theta = random_theta(&post.layout, &mut rng);
            let u = Matrix::from_fn(5, post.layout.q1, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * z
            });
            let b = Matrix::from_fn(5, post.layout.q2, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * z
            });
            let cure: Vec<u8> = ds
                .survival
                .iter()
                .map(|s| u8::from(s.status == 1 || rng.gen_bool(0.5)))
                .collect();
            let mine = post.log_joint(&theta, &u, &b, &cure).expect("joint");
            let brute = brute_log_joint(&ds, &spec, &theta, &u, &b, &cure);
            assert_relative_eq!(mine, brute, max_relative = 1e-10, epsilon = 1e-9);
        }
    }

    // -- conditional cure updates and per-subject likelihoods ------------------

    #[test]
    fn cured_probabilities_compose_public_survival_pieces() {
        let (post, ds, _, _) = make_instance(10, Family::Zinb, false, 21);
        let mut rng = stream_rng(12, 0);
        let w = random_w(post.dim(), &mut rng, 0.4);
        let probs = post.cured_probs(&w);
        let (theta, u, b) = post.from_unconstrained(&w);
        for i in 0..10 {
            if ds.survival[i].status == 1 {
                assert_eq!(probs[i], 0.0);
                continue;
            }
            let a_l = dot(ds.covariates.x1_base.row(i), &theta.beta1)
                + dot(ds.covariates.z1_base.row(i), u.row(i));
            let b_l = ds.design.x1_time().map_or(0.0, |j| theta.beta1[j])
                + ds.design.z1_time().map_or(0.0, |j| u.get(i, j));
            let a_z = dot(ds.covariates.x2_base.row(i), &theta.beta2)
                + dot(ds.covariates.z2_base.row(i), b.row(i));
            let b_z = ds.design.x2_time().map_or(0.0, |j| theta.beta2[j])
                + ds.design.z2_time().map_or(0.0, |j| b.get(i, j));
            let g = cure::risk_score(
                &theta.xi2,
                ds.covariates.w2.row(i),
                theta.alpha1,
                theta.alpha2,
                LinPred::new(a_l, b_l),
                LinPred::new(a_z, b_z),
            );
            let big_h = cure::cum_hazard_uncured(
                ds.survival[i].time,
                &ds.knots,
                &theta.h_star,
                &g,
            )
            .expect("inside grid");
            let pi = cure::cure_prob(&theta.xi1, ds.covariates.w1.row(i));
            let expect = cure::prob_cured_given_survival(pi, (-big_h).exp());
            assert_relative_eq!(probs[i], expect, max_relative = 1e-12);
        }
        let (post_nc, _, _, _) = make_instance(10, Family::Zinb, true, 21);
        assert!(post_nc.cured_probs(&w).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn subject_logliks_compose_the_public_likelihood_pieces() {
        let (post, ds, spec, cure) = make_instance(6, Family::Zinb, false, 23);
        let mut rng = stream_rng(12, 1);
        let w = random_w(post.dim(), &mut rng, 0.4);
        let (theta, u, b) = post.from_unconstrained(&w);
        let lls = post.subject_logliks(&theta, &u, &b, &cure).expect("logliks");
        for i in 0..6 {
            let range = ds.row_range[i].clone();
            let ys: Vec<u32> = range.clone().map(|rix| ds.longitudinal[rix].y).collect();
            let etas_l: Vec<f64> = range
                .clone()
                .map(|rix| {
                    dot(ds.covariates.x1.row(rix), &theta.beta1)
                        + dot(ds.covariates.z1.row(rix), u.row(i))
                })
                .collect();
            let etas_z: Vec<f64> = range
                .clone()
                .map(|rix| {
                    dot(ds.covariates.x2.row(rix), &theta.beta2)
                        + dot(ds.covariates.z2.row(rix), b.row(i))
                })
                .collect();
            let mut expect =
                crate::hurdle::subject_long_loglik(&ys, &etas_l, &etas_z, spec.family, theta.r)
                    .expect("rows");
            let a_l = dot(ds.covariates.x1_base.row(i), &theta.beta1)
                + dot(ds.covariates.z1_base.row(i), u.row(i));
            let b_l = ds.design.x1_time().map_or(0.0, |j| theta.beta1[j])
                + ds.design.z1_time().map_or(0.0, |j| u.get(i, j));
            let a_z = dot(ds.covariates.x2_base.row(i), &theta.beta2)
                + dot(ds.covariates.z2_base.row(i), b.row(i));
            let b_z = ds.design.x2_time().map_or(0.0, |j| theta.beta2[j])
                + ds.design.z2_time().map_or(0.0, |j| b.get(i, j));
            let g = cure::risk_score(
                &theta.xi2,
                ds.covariates.w2.row(i),
                theta.alpha1,
                theta.alpha2,
                LinPred::new(a_l, b_l),
                LinPred::new(a_z, b_z),
            );
            let t = ds.survival[i].time;
            let pi = cure::cure_prob(&theta.xi1, ds.covariates.w1.row(i));
            if cure[i] == 1 {
                expect += (1.0 - pi).ln();
                if ds.survival[i].status == 1 {
                    expect += cure::log_hazard_uncured(t, &ds.knots, &theta.h_star, &g)
                        .expect("inside grid");
                }
                expect -= cure::cum_hazard_uncured(t, &ds.knots, &theta.h_star, &g)
                    .expect("inside grid");
            } else {
                expect += pi.ln();
            }
            assert_relative_eq!(lls[i], expect, max_relative = 1e-12, epsilon = 1e-12);
        }
    }
}
