//! Dataset ingestion, validation and design-matrix materialization.
//!
//! Two CSV tables describe a joint dataset:
//!
//! * **longitudinal**: `id,time,y,<covariate columns...>` — repeated count
//!   measurements, one row per subject-visit;
//! * **survival**: `id,time,status,<covariate columns...>` — exactly one row
//!   per subject with the observed event/censoring time and status (1 =
//!   event, 0 = censored).
//!
//! A [`ModelSpec`] names which columns (plus synthetic intercept/time
//! columns) enter each design block: `x1`/`z1` drive the log-rate predictor,
//! `x2`/`z2` the structural-zero predictor, `w1` the cure incidence and `w2`
//! the hazard. Design matrices are materialized once at load, so likelihood
//! code never touches raw tables.
//!
//! # Validation contract
//!
//! Loading fails loudly on schema problems (missing columns), parse problems
//! (with the offending data row), and consistency problems: unknown subjects,
//! non-`{0,1}` status, non-positive observation times, longitudinal rows
//! after the observed time, duplicate visit times. Missing counts (empty or
//! `NA`) drop the row with a warning — their covariates are still harvested
//! for the subject baseline. Subject ids are remapped to dense indices
//! `0..N-1` in a deterministic order (numeric when every id parses as an
//! integer, lexicographic otherwise), so row order never depends on input
//! order. The baseline-hazard knot grid is resolved and validated here as
//! well: the final knot must exceed the largest observed time.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::cure::{knots_from_quantiles, validate_knots};
use crate::hurdle::Family;
use crate::util::Matrix;
use crate::{HjmError, Result};

/// One retained longitudinal measurement (count present).
#[derive(Debug, Clone, PartialEq)]
pub struct LongRecord {
    /// Dense subject index in `0..n_subjects`.
    pub subject: usize,
    /// Measurement time, in `[0, obs_time]` of the subject.
    pub time: f64,
    /// Observed count.
    pub y: u32,
}

/// One survival outcome row.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvRecord {
    /// Dense subject index in `0..n_subjects`.
    pub subject: usize,
    /// Observed event or censoring time (positive).
    pub time: f64,
    /// 1 = event observed, 0 = censored.
    pub status: u8,
}

/// One column of a design block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DesignCol {
    /// Constant 1.
    Intercept,
    /// The measurement time (longitudinal blocks) — the only column allowed
    /// to vary within a subject.
    Time,
    /// A named covariate column from the corresponding CSV file.
    Covar(String),
}

impl DesignCol {
    /// Parse from the configuration spelling: `"intercept"`, `"time"`, or a
    /// covariate column name.
    pub fn parse(s: &str) -> DesignCol {
        match s {
            "intercept" => DesignCol::Intercept,
            "time" => DesignCol::Time,
            other => DesignCol::Covar(other.to_string()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            DesignCol::Intercept => "intercept".into(),
            DesignCol::Time => "time".into(),
            DesignCol::Covar(c) => c.clone(),
        }
    }
}

/// Column lists of all six design blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignInfo {
    /// Fixed-effect columns of the log-rate predictor.
    pub x1: Vec<DesignCol>,
    /// Random-effect columns of the log-rate predictor (subset of `x1`).
    pub z1: Vec<DesignCol>,
    /// Fixed-effect columns of the structural-zero predictor.
    pub x2: Vec<DesignCol>,
    /// Random-effect columns of the structural-zero predictor (subset of `x2`).
    pub z2: Vec<DesignCol>,
    /// Cure-incidence columns (survival file covariates / intercept).
    pub w1: Vec<DesignCol>,
    /// Hazard covariate columns (no intercept: the baseline hazard plays
    /// that role).
    pub w2: Vec<DesignCol>,
}

impl DesignInfo {
    fn time_index(cols: &[DesignCol]) -> Option<usize> {
        cols.iter().position(|c| *c == DesignCol::Time)
    }

    /// Index of the time column in `x1`, if any.
    pub fn x1_time(&self) -> Option<usize> {
        Self::time_index(&self.x1)
    }
    pub fn x2_time(&self) -> Option<usize> {
        Self::time_index(&self.x2)
    }
    pub fn z1_time(&self) -> Option<usize> {
        Self::time_index(&self.z1)
    }
    pub fn z2_time(&self) -> Option<usize> {
        Self::time_index(&self.z2)
    }
}

/// Baseline-hazard segmentation: explicit knots or a number of segments to
/// place by the event-time quantile rule.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineSpec {
    /// Explicit knot grid `nu_1 < ... < nu_Q` (with `nu_0 = 0` implicit).
    Knots(Vec<f64>),
    /// `Q` segments; interior knots at event-time quantiles, final knot at
    /// `1.01 *` the largest observed time.
    Segments(usize),
}

/// Prior hyperparameters. Defaults are the weakly informative settings used
/// throughout: N(0, 10^2) on regression coefficients and associations,
/// Gamma(0.1, 0.1) on baseline hazard levels, Gamma(2, 0.1) on the
/// dispersion, half-Cauchy(0, 2.5) on random-effect standard deviations and
/// a shape-2 LKJ prior on correlation matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub beta_sd: f64,
    pub xi_sd: f64,
    pub alpha_sd: f64,
    pub h_shape: f64,
    pub h_rate: f64,
    pub r_shape: f64,
    pub r_rate: f64,
    pub sigma_scale: f64,
    pub lkj_eta: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            beta_sd: 10.0,
            xi_sd: 10.0,
            alpha_sd: 10.0,
            h_shape: 0.1,
            h_rate: 0.1,
            r_shape: 2.0,
            r_rate: 0.1,
            sigma_scale: 2.5,
            lkj_eta: 2.0,
        }
    }
}

/// Full model specification: count family, design mapping, baseline hazard
/// segmentation, priors, and the no-cure verification switch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub design: DesignInfo,
    pub baseline: BaselineSpec,
    pub priors: Priors,
    /// When set, the cure mass is forced to zero: every subject is
    /// susceptible, incidence terms drop from the likelihood and the
    /// incidence coefficients keep only their prior. Used to reduce the
    /// model to a standard joint model for verification.
    pub no_cure: bool,
}

impl ModelSpec {
    /// The default design of the simulation engine: intercept + time + two
    /// baseline covariates on the count rate (random intercept and slope),
    /// intercept + time + one covariate on the structural zeros (random
    /// intercept), intercept + one covariate on incidence, two covariates on
    /// the hazard.
    pub fn default_simulation(family: Family) -> ModelSpec {
        let c = |s: &str| DesignCol::Covar(s.to_string());
        ModelSpec {
            family,
            design: DesignInfo {
                x1: vec![DesignCol::Intercept, DesignCol::Time, c("x1"), c("x2")],
                z1: vec![DesignCol::Intercept, DesignCol::Time],
                x2: vec![DesignCol::Intercept, DesignCol::Time, c("x1")],
                z2: vec![DesignCol::Intercept],
                w1: vec![DesignCol::Intercept, c("w1")],
                w2: vec![c("w1"), c("w2")],
            },
            baseline: BaselineSpec::Segments(1),
            priors: Priors::default(),
            no_cure: false,
        }
    }
}

/// Structural validation of a [`ModelSpec`], independent of any dataset:
/// non-empty blocks where required, at most one time column per block,
/// random-effect columns being subsets of their fixed-effect blocks, valid
/// prior hyperparameters and baseline segmentation.
pub fn validate_spec(spec: &ModelSpec) -> Result<()> {
    let d = &spec.design;
    for (name, cols, allow_empty) in [
        ("x1", &d.x1, false),
        ("z1", &d.z1, false),
        ("x2", &d.x2, false),
        ("z2", &d.z2, false),
        ("w1", &d.w1, false),
        ("w2", &d.w2, true),
    ] {
        if cols.is_empty() && !allow_empty {
            return Err(HjmError::InvalidSpec(format!("design block {name} must not be empty")));
        }
        let n_time = cols.iter().filter(|c| **c == DesignCol::Time).count();
        if n_time > 1 {
            return Err(HjmError::InvalidSpec(format!(
                "design block {name} lists the time column more than once"
            )));
        }
        let mut seen: Vec<&DesignCol> = Vec::new();
        for c in cols.iter() {
            if seen.contains(&c) {
                return Err(HjmError::InvalidSpec(format!(
                    "design block {name} repeats column {}",
                    c.name()
                )));
            }
            seen.push(c);
        }
    }
    for (name, cols) in [("w1", &d.w1), ("w2", &d.w2)] {
        if cols.iter().any(|c| *c == DesignCol::Time) {
            return Err(HjmError::InvalidSpec(format!(
                "survival design block {name} must be time-fixed; the association terms carry \
                 the time dependence"
            )));
        }
    }
    for (zname, z, xname, x) in [("z1", &d.z1, "x1", &d.x1), ("z2", &d.z2, "x2", &d.x2)] {
        for c in z.iter() {
            if !x.contains(c) {
                return Err(HjmError::InvalidSpec(format!(
                    "random-effect column {} of {zname} is not part of {xname}",
                    c.name()
                )));
            }
        }
    }
    match &spec.baseline {
        BaselineSpec::Segments(0) => {
            return Err(HjmError::InvalidSpec("baseline hazard needs at least one segment".into()))
        }
        BaselineSpec::Knots(k) if k.is_empty() => {
            return Err(HjmError::InvalidSpec("explicit knot list must not be empty".into()))
        }
        _ => {}
    }
    let p = &spec.priors;
    for (name, v) in [
        ("beta_sd", p.beta_sd),
        ("xi_sd", p.xi_sd),
        ("alpha_sd", p.alpha_sd),
        ("h_shape", p.h_shape),
        ("h_rate", p.h_rate),
        ("r_shape", p.r_shape),
        ("r_rate", p.r_rate),
        ("sigma_scale", p.sigma_scale),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(HjmError::InvalidSpec(format!(
                "prior hyperparameter {name} must be positive and finite, got {v}"
            )));
        }
    }
    if !(p.lkj_eta >= 1.0) {
        return Err(HjmError::InvalidSpec(format!(
            "LKJ shape must be >= 1 for a proper, mode-at-identity prior, got {}",
            p.lkj_eta
        )));
    }
    Ok(())
}

/// Parsed-but-unvalidated CSV content. The simulation engine builds this
/// directly; CSV loading produces it from files. Both then share
/// [`build_dataset`], so every ingestion path applies identical validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTables {
    pub long_covar_names: Vec<String>,
    /// `(id, time, count, covariates)`; a `None` count marks a missing cell.
    pub long_rows: Vec<(String, f64, Option<u32>, Vec<f64>)>,
    pub surv_covar_names: Vec<String>,
    /// `(id, time, status, covariates)`.
    pub surv_rows: Vec<(String, f64, u8, Vec<f64>)>,
}

/// Materialized design matrices.
///
/// `x1/z1/x2/z2` have one row per retained longitudinal record; `w1/w2` one
/// row per subject. The `*_base` blocks hold each subject's design row with
/// the time column set to zero — the time-fixed part used when predictors
/// are evaluated at arbitrary survival times.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateBlocks {
    pub x1: Matrix,
    pub z1: Matrix,
    pub x2: Matrix,
    pub z2: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub x1_base: Matrix,
    pub z1_base: Matrix,
    pub x2_base: Matrix,
    pub z2_base: Matrix,
}

/// A fully validated joint dataset with materialized designs and a resolved
/// baseline-hazard knot grid.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDataset {
    /// Retained longitudinal records, sorted by `(subject, time)`.
    pub longitudinal: Vec<LongRecord>,
    /// One record per subject, indexed by the dense subject index.
    pub survival: Vec<SurvRecord>,
    pub covariates: CovariateBlocks,
    pub design: DesignInfo,
    /// Per-subject ranges into `longitudinal` (and the aligned matrices).
    pub row_range: Vec<std::ops::Range<usize>>,
    /// Original subject ids in dense-index order.
    pub ids: Vec<String>,
    /// Largest observed survival time.
    pub max_time: f64,
    /// Resolved baseline-hazard knots, `nu_1 < ... < nu_Q > max_time`.
    pub knots: Vec<f64>,
    /// The raw tables after sorting/remapping, kept so a dataset can be
    /// serialized back to CSV byte-for-byte reproducibly.
    pub raw: RawTables,
}

impl JointDataset {
    pub fn n_subjects(&self) -> usize {
        self.survival.len()
    }

    /// Retained longitudinal records of one subject.
    pub fn rows_of(&self, subject: usize) -> &[LongRecord] {
        &self.longitudinal[self.row_range[subject].clone()]
    }
}

fn id_sort_key(ids: &[String]) -> Vec<(Option<i64>, String)> {
    let all_numeric = ids.iter().all(|s| s.trim().parse::<i64>().is_ok());
    ids.iter()
        .map(|s| {
            let num = if all_numeric { s.trim().parse::<i64>().ok() } else { None };
            (num, s.clone())
        })
        .collect()
}

fn design_width(cols: &[DesignCol]) -> usize {
    cols.len()
}

fn materialize_row(cols: &[DesignCol], time: f64, covar_names: &[String], covars: &[f64]) -> Result<Vec<f64>> {
    cols.iter()
        .map(|c| match c {
            DesignCol::Intercept => Ok(1.0),
            DesignCol::Time => Ok(time),
            DesignCol::Covar(name) => covar_names
                .iter()
                .position(|n| n == name)
                .map(|j| covars[j])
                .ok_or_else(|| HjmError::Schema(format!("design references unknown column {name}"))),
        })
        .collect()
}

/// Validate [`RawTables`] against a [`ModelSpec`] and assemble the
/// [`JointDataset`]. See the module docs for the full validation contract.
pub fn build_dataset(spec: &ModelSpec, raw: &RawTables) -> Result<JointDataset> {
    validate_spec(spec)?;

    // Design columns must resolve against the available covariate columns.
    for (blocks, names, file) in [
        (vec![&spec.design.x1, &spec.design.z1, &spec.design.x2, &spec.design.z2], &raw.long_covar_names, "longitudinal"),
        (vec![&spec.design.w1, &spec.design.w2], &raw.surv_covar_names, "survival"),
    ] {
        for cols in blocks {
            for c in cols.iter() {
                if let DesignCol::Covar(name) = c {
                    if !names.contains(name) {
                        return Err(HjmError::Schema(format!(
                            "design column {name} not found in the {file} file (available: {})",
                            names.join(", ")
                        )));
                    }
                }
            }
        }
    }

    // --- survival table: one row per subject, deterministic order ---------
    let mut surv_by_id: BTreeMap<(Option<i64>, String), (f64, u8, Vec<f64>)> = BTreeMap::new();
    {
        let ids: Vec<String> = raw.surv_rows.iter().map(|r| r.0.clone()).collect();
        let keys = id_sort_key(&ids);
        for (row, key) in raw.surv_rows.iter().zip(keys) {
            let (_, time, status, covars) = row;
            if !time.is_finite() || *time <= 0.0 {
                return Err(HjmError::Consistency(format!(
                    "subject {} has non-positive observed time {time}",
                    row.0
                )));
            }
            if surv_by_id.insert(key, (*time, *status, covars.clone())).is_some() {
                return Err(HjmError::Consistency(format!(
                    "subject {} appears more than once in the survival file",
                    row.0
                )));
            }
        }
    }
    if surv_by_id.is_empty() {
        // An empty study is degenerate but well defined: the posterior
        // reduces to the prior. Downstream consumers get zero subjects.
        log::warn!("survival file contains no subjects; model reduces to its prior");
    }

    let ids: Vec<String> = surv_by_id.keys().map(|(_, s)| s.clone()).collect();
    let index_of: BTreeMap<String, usize> =
        ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let n = ids.len();
    log::debug!("remapped {n} subject ids to dense indices 0..{n}");
    for (i, id) in ids.iter().enumerate() {
        log::debug!("subject id {id} -> index {i}");
    }

    // --- longitudinal rows: group, sort, validate --------------------------
    let mut per_subject: Vec<Vec<(f64, Option<u32>, Vec<f64>)>> = vec![Vec::new(); n];
    for (row_no, (id, time, y, covars)) in raw.long_rows.iter().enumerate() {
        let &subject = index_of.get(id).ok_or_else(|| {
            HjmError::Consistency(format!(
                "longitudinal data row {} refers to subject {id} absent from the survival file",
                row_no + 1
            ))
        })?;
        if !time.is_finite() || *time < 0.0 {
            return Err(HjmError::Consistency(format!(
                "longitudinal data row {} has invalid time {time}",
                row_no + 1
            )));
        }
        per_subject[subject].push((*time, *y, covars.clone()));
    }

    let surv_records: Vec<(f64, u8, Vec<f64>)> = surv_by_id.into_values().collect();
    let max_time = surv_records.iter().map(|r| r.0).fold(0.0, f64::max);

    let p1 = design_width(&spec.design.x1);
    let q1 = design_width(&spec.design.z1);
    let p2 = design_width(&spec.design.x2);
    let q2 = design_width(&spec.design.z2);
    let r1 = design_width(&spec.design.w1);
    let r2 = design_width(&spec.design.w2);

    let mut longitudinal = Vec::new();
    let mut row_range = Vec::with_capacity(n);
    let mut x1 = Vec::new();
    let mut z1 = Vec::new();
    let mut x2 = Vec::new();
    let mut z2 = Vec::new();
    let mut x1_base = Matrix::zeros(n, p1);
    let mut z1_base = Matrix::zeros(n, q1);
    let mut x2_base = Matrix::zeros(n, p2);
    let mut z2_base = Matrix::zeros(n, q2);
    let mut w1 = Matrix::zeros(n, r1);
    let mut w2 = Matrix::zeros(n, r2);
    let mut survival = Vec::with_capacity(n);
    let mut sorted_long_rows: Vec<(String, f64, Option<u32>, Vec<f64>)> = Vec::new();
    let mut dropped = 0usize;

    for (subject, rows) in per_subject.iter_mut().enumerate() {
        let (obs_time, status, surv_covars) = &surv_records[subject];
        survival.push(SurvRecord { subject, time: *obs_time, status: *status });
        w1.row_mut(subject).copy_from_slice(&materialize_row(
            &spec.design.w1,
            0.0,
            &raw.surv_covar_names,
            surv_covars,
        )?);
        w2.row_mut(subject).copy_from_slice(&materialize_row(
            &spec.design.w2,
            0.0,
            &raw.surv_covar_names,
            surv_covars,
        )?);

        rows.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));
        for pair in rows.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(HjmError::Consistency(format!(
                    "subject {} has two longitudinal rows at time {}",
                    ids[subject], pair[0].0
                )));
            }
        }
        if let Some(last) = rows.last() {
            if last.0 > *obs_time {
                return Err(HjmError::Consistency(format!(
                    "subject {} has a longitudinal row at time {} after its observed time {}",
                    ids[subject], last.0, obs_time
                )));
            }
        }

        // Baseline design row: earliest raw row with the time column zeroed;
        // intercept-only fallback when the subject has no rows at all.
        if let Some(first) = rows.first() {
            x1_base.row_mut(subject).copy_from_slice(&materialize_row(
                &spec.design.x1,
                0.0,
                &raw.long_covar_names,
                &first.2,
            )?);
            z1_base.row_mut(subject).copy_from_slice(&materialize_row(
                &spec.design.z1,
                0.0,
                &raw.long_covar_names,
                &first.2,
            )?);
            x2_base.row_mut(subject).copy_from_slice(&materialize_row(
                &spec.design.x2,
                0.0,
                &raw.long_covar_names,
                &first.2,
            )?);
            z2_base.row_mut(subject).copy_from_slice(&materialize_row(
                &spec.design.z2,
                0.0,
                &raw.long_covar_names,
                &first.2,
            )?);
        } else {
            log::warn!(
                "subject {} has no longitudinal rows; using intercept-only baseline covariates",
                ids[subject]
            );
            let zeros = vec![0.0; raw.long_covar_names.len()];
            x1_base.row_mut(subject).copy_from_slice(&materialize_row(
                &spec.design.x1,
                0.0,
                &raw.long_covar_names,
                &zeros,
            )?);
            z1_base.row_mut(subject).copy_from_slice(&materialize_row(
                &spec.design.z1,
                0.0,
                &raw.long_covar_names,
                &zeros,
            )?);
            x2_base.row_mut(subject).copy_from_slice(&materialize_row(
                &spec.design.x2,
                0.0,
                &raw.long_covar_names,
                &zeros,
            )?);
            z2_base.row_mut(subject).copy_from_slice(&materialize_row(
                &spec.design.z2,
                0.0,
                &raw.long_covar_names,
                &zeros,
            )?);
        }

        let start = longitudinal.len();
        for (time, y, covars) in rows.iter() {
            sorted_long_rows.push((ids[subject].clone(), *time, *y, covars.clone()));
            match y {
                None => {
                    dropped += 1;
                    log::warn!(
                        "subject {} time {time}: missing count, row dropped from the likelihood",
                        ids[subject]
                    );
                }
                Some(y) => {
                    longitudinal.push(LongRecord { subject, time: *time, y: *y });
                    x1.push(materialize_row(&spec.design.x1, *time, &raw.long_covar_names, covars)?);
                    z1.push(materialize_row(&spec.design.z1, *time, &raw.long_covar_names, covars)?);
                    x2.push(materialize_row(&spec.design.x2, *time, &raw.long_covar_names, covars)?);
                    z2.push(materialize_row(&spec.design.z2, *time, &raw.long_covar_names, covars)?);
                }
            }
        }
        row_range.push(start..longitudinal.len());
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} longitudinal rows with missing counts");
    }

    let to_matrix = |rows: Vec<Vec<f64>>, cols: usize| {
        let mut m = Matrix::zeros(rows.len(), cols);
        for (i, r) in rows.into_iter().enumerate() {
            m.row_mut(i).copy_from_slice(&r);
        }
        m
    };

    // --- baseline hazard knots ---------------------------------------------
    let event_times: Vec<f64> =
        survival.iter().filter(|s| s.status == 1).map(|s| s.time).collect();
    let knots = match &spec.baseline {
        BaselineSpec::Knots(k) => {
            validate_knots(k, max_time)?;
            k.clone()
        }
        BaselineSpec::Segments(_) if survival.is_empty() => {
            // No observed times to anchor the quantile rule; any positive
            // grid works because nothing is ever evaluated on it.
            vec![1.0]
        }
        BaselineSpec::Segments(q) => {
            let k = knots_from_quantiles(&event_times, *q, max_time)?;
            validate_knots(&k, max_time)?;
            k
        }
    };

    let ordered_surv_rows: Vec<(String, f64, u8, Vec<f64>)> = survival
        .iter()
        .map(|s| (ids[s.subject].clone(), s.time, s.status, surv_records[s.subject].2.clone()))
        .collect();

    Ok(JointDataset {
        longitudinal,
        survival,
        covariates: CovariateBlocks {
            x1: to_matrix(x1, p1),
            z1: to_matrix(z1, q1),
            x2: to_matrix(x2, p2),
            z2: to_matrix(z2, q2),
            w1,
            w2,
            x1_base,
            z1_base,
            x2_base,
            z2_base,
        },
        design: spec.design.clone(),
        row_range,
        ids,
        max_time,
        knots,
        raw: RawTables {
            long_covar_names: raw.long_covar_names.clone(),
            long_rows: sorted_long_rows,
            surv_covar_names: raw.surv_covar_names.clone(),
            surv_rows: ordered_surv_rows,
        },
    })
}

fn read_csv_table(
    path: &Path,
    leading: &[&str],
) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| HjmError::Schema(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> =
        reader.headers().map_err(|e| HjmError::Schema(e.to_string()))?.iter().map(String::from).collect();
    for (i, want) in leading.iter().enumerate() {
        if headers.get(i).map(String::as_str) != Some(*want) {
            return Err(HjmError::Schema(format!(
                "{}: expected leading columns {:?}, found {:?}",
                path.display(),
                leading,
                headers
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| HjmError::Parse { row: i + 1, msg: e.to_string() })?;
        if rec.len() != headers.len() {
            return Err(HjmError::Parse {
                row: i + 1,
                msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        rows.push(rec.iter().map(String::from).collect());
    }
    Ok((headers, rows))
}

fn parse_f64(field: &str, row: usize, what: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| HjmError::Parse {
        row,
        msg: format!("cannot parse {what} value {field:?} as a number"),
    })
}

/// Load and validate a joint dataset from its two CSV files.
pub fn load_dataset(
    longitudinal_path: &Path,
    survival_path: &Path,
    spec: &ModelSpec,
) -> Result<JointDataset> {
    let (long_headers, long_rows) = read_csv_table(longitudinal_path, &["id", "time", "y"])?;
    let (surv_headers, surv_rows) = read_csv_table(survival_path, &["id", "time", "status"])?;

    let long_covar_names: Vec<String> = long_headers[3..].to_vec();
    let surv_covar_names: Vec<String> = surv_headers[3..].to_vec();

    let mut raw_long = Vec::with_capacity(long_rows.len());
    for (i, row) in long_rows.iter().enumerate() {
        let data_row = i + 1;
        let time = parse_f64(&row[1], data_row, "time")?;
        let y = match row[2].as_str() {
            "" | "NA" => None,
            s => Some(s.parse::<u32>().map_err(|_| HjmError::Parse {
                row: data_row,
                msg: format!("cannot parse count value {s:?} as a non-negative integer"),
            })?),
        };
        let covars = row[3..]
            .iter()
            .map(|f| parse_f64(f, data_row, "covariate"))
            .collect::<Result<Vec<f64>>>()?;
        raw_long.push((row[0].clone(), time, y, covars));
    }

    let mut raw_surv = Vec::with_capacity(surv_rows.len());
    for (i, row) in surv_rows.iter().enumerate() {
        let data_row = i + 1;
        let time = parse_f64(&row[1], data_row, "time")?;
        let status_f = parse_f64(&row[2], data_row, "status")?;
        let status = if status_f == 0.0 {
            0u8
        } else if status_f == 1.0 {
            1u8
        } else {
            return Err(HjmError::Consistency(format!(
                "subject {} has status {status_f}; only 0 (censored) and 1 (event) are allowed",
                row[0]
            )));
        };
        let covars = row[3..]
            .iter()
            .map(|f| parse_f64(f, data_row, "covariate"))
            .collect::<Result<Vec<f64>>>()?;
        raw_surv.push((row[0].clone(), time, status, covars));
    }

    let raw = RawTables {
        long_covar_names,
        long_rows: raw_long,
        surv_covar_names,
        surv_rows: raw_surv,
    };
    build_dataset(spec, &raw)
}

/// Serialize the longitudinal table of [`RawTables`] to CSV. Floats are
/// written in shortest round-trip form, so reloading reproduces them
/// bit-for-bit.
pub fn write_longitudinal_csv(path: &Path, raw: &RawTables) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "id,time,y")?;
    for name in &raw.long_covar_names {
        write!(f, ",{name}")?;
    }
    writeln!(f)?;
    for (id, time, y, covars) in &raw.long_rows {
        write!(f, "{id},{time},")?;
        match y {
            Some(y) => write!(f, "{y}")?,
            None => write!(f, "NA")?,
        }
        for v in covars {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// Serialize the survival table of [`RawTables`] to CSV.
pub fn write_survival_csv(path: &Path, raw: &RawTables) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "id,time,status")?;
    for name in &raw.surv_covar_names {
        write!(f, ",{name}")?;
    }
    writeln!(f)?;
    for (id, time, status, covars) in &raw.surv_rows {
        write!(f, "{id},{time},{status}")?;
        for v in covars {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    fn toy_spec() -> ModelSpec {
        ModelSpec::default_simulation(Family::Zip)
    }

    const LONG_OK: &str = "\
id,time,y,x1,x2
2,0.0,3,1,0.5
2,0.5,0,1,0.5
1,0.0,1,0,-.25
1,0.5,2,0,-0.25
";
    const SURV_OK: &str = "\
id,time,status,w1,w2
2,1.4,1,1,0.3
1,2.0,0,0,-1.1
";

    #[test]
    fn loads_and_remaps_subjects_in_numeric_id_order() {
        let dir = tempfile::tempdir().unwrap();
        let lp = write_file(&dir, "long.csv", LONG_OK);
        let sp = write_file(&dir, "surv.csv", SURV_OK);
        let ds = load_dataset(&lp, &sp, &toy_spec()).unwrap();
        assert_eq!(ds.n_subjects(), 2);
        assert_eq!(ds.ids, vec!["1".to_string(), "2".to_string()]);
        // Subject 0 is original id 1 (numeric order), censored at 2.0.
        assert_eq!(ds.survival[0].status, 0);
        assert_eq!(ds.survival[0].time, 2.0);
        assert_eq!(ds.rows_of(0).len(), 2);
        assert_eq!(ds.rows_of(1).len(), 2);
        // Design row of subject 1 (original id 2) at its first visit:
        // [intercept, time, x1, x2] = [1, 0, 1, 0.5].
        let r = ds.row_range[1].start;
        assert_eq!(ds.covariates.x1.row(r), &[1.0, 0.0, 1.0, 0.5]);
        // z1 subset: [intercept, time].
        assert_eq!(ds.covariates.z1.row(r), &[1.0, 0.0]);
        // Survival designs: w1 = [1, w1-covar], w2 = [w1-covar, w2-covar].
        assert_eq!(ds.covariates.w1.row(1), &[1.0, 1.0]);
        assert_eq!(ds.covariates.w2.row(1), &[1.0, 0.3]);
        // Knot rule: single segment ending at 1.01 * 2.0.
        assert_eq!(ds.knots, vec![2.02]);
        assert_eq!(ds.max_time, 2.0);
    }

    #[test]
    fn row_order_is_deterministic_regardless_of_input_order() {
        let dir = tempfile::tempdir().unwrap();
        let shuffled_long = "\
id,time,y,x1,x2
1,0.5,2,0,-0.25
2,0.5,0,1,0.5
1,0.0,1,0,-.25
2,0.0,3,1,0.5
";
        let shuffled_surv = "\
id,time,status,w1,w2
1,2.0,0,0,-1.1
2,1.4,1,1,0.3
";
        let a = load_dataset(
            &write_file(&dir, "l1.csv", LONG_OK),
            &write_file(&dir, "s1.csv", SURV_OK),
            &toy_spec(),
        )
        .unwrap();
        let b = load_dataset(
            &write_file(&dir, "l2.csv", shuffled_long),
            &write_file(&dir, "s2.csv", shuffled_surv),
            &toy_spec(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn serialization_round_trip_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(
            &write_file(&dir, "long.csv", LONG_OK),
            &write_file(&dir, "surv.csv", SURV_OK),
            &toy_spec(),
        )
        .unwrap();
        let lp = dir.path().join("long2.csv");
        let sp = dir.path().join("surv2.csv");
        write_longitudinal_csv(&lp, &ds.raw).unwrap();
        write_survival_csv(&sp, &ds.raw).unwrap();
        let reloaded = load_dataset(&lp, &sp, &toy_spec()).unwrap();
        assert_eq!(ds, reloaded);
    }

    #[test]
    fn missing_counts_drop_rows_but_keep_baseline_covariates() {
        let dir = tempfile::tempdir().unwrap();
        let long = "\
id,time,y,x1,x2
1,0.0,NA,1,0.7
1,0.5,4,1,0.7
2,0.0,,0,0.1
";
        let surv = "\
id,time,status,w1,w2
1,2.0,1,1,0.0
2,1.0,0,0,0.2
";
        let ds = load_dataset(
            &write_file(&dir, "long.csv", long),
            &write_file(&dir, "surv.csv", surv),
            &toy_spec(),
        )
        .unwrap();
        // Subject 1 keeps one of two rows; subject 2 keeps none.
        assert_eq!(ds.rows_of(0).len(), 1);
        assert_eq!(ds.rows_of(1).len(), 0);
        // Subject 2's baseline covariates come from its dropped row.
        assert_eq!(ds.covariates.x1_base.row(1), &[1.0, 0.0, 0.0, 0.1]);
        // Subject 1's baseline has the time column zeroed.
        assert_eq!(ds.covariates.x1_base.row(0), &[1.0, 0.0, 1.0, 0.7]);
    }

    #[test]
    fn schema_error_names_the_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let long = "id,time,y,x9\n1,0,1,2.0\n";
        let err = load_dataset(
            &write_file(&dir, "long.csv", long),
            &write_file(&dir, "surv.csv", SURV_OK),
            &toy_spec(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x1"), "error should name the missing column: {msg}");
    }

    #[test]
    fn parse_error_carries_the_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let long = "\
id,time,y,x1,x2
1,0.0,1,0,0.0
1,0.5,oops,0,0.0
";
        let err = load_dataset(
            &write_file(&dir, "long.csv", long),
            &write_file(&dir, "surv.csv", SURV_OK),
            &toy_spec(),
        )
        .unwrap_err();
        match err {
            HjmError::Parse { row, .. } => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn consistency_errors_cover_status_times_and_membership() {
        let dir = tempfile::tempdir().unwrap();
        // Unknown subject in the longitudinal file.
        let long = "id,time,y,x1,x2\n9,0.0,1,0,0.0\n";
        let err = load_dataset(
            &write_file(&dir, "l.csv", long),
            &write_file(&dir, "s.csv", SURV_OK),
            &toy_spec(),
        )
        .unwrap_err();
        assert!(matches!(err, HjmError::Consistency(_)), "{err}");

        // Status outside {0, 1}.
        let surv_bad = "id,time,status,w1,w2\n1,1.0,2,0,0\n";
        let err = load_dataset(
            &write_file(&dir, "l2.csv", "id,time,y,x1,x2\n"),
            &write_file(&dir, "s2.csv", surv_bad),
            &toy_spec(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("status"), "{err}");

        // Non-positive observed time.
        let surv_bad = "id,time,status,w1,w2\n1,0.0,1,0,0\n";
        let err = load_dataset(
            &write_file(&dir, "l3.csv", "id,time,y,x1,x2\n"),
            &write_file(&dir, "s3.csv", surv_bad),
            &toy_spec(),
        )
        .unwrap_err();
        assert!(matches!(err, HjmError::Consistency(_)), "{err}");

        // Longitudinal measurement after the observed time.
        let long_late = "id,time,y,x1,x2\n1,5.0,1,0,0.0\n";
        let surv_short = "id,time,status,w1,w2\n1,2.0,0,0,0\n";
        let err = load_dataset(
            &write_file(&dir, "l4.csv", long_late),
            &write_file(&dir, "s4.csv", surv_short),
            &toy_spec()
        )
        .unwrap_err();
        assert!(err.to_string().contains("after its observed time"), "{err}");

        // Duplicate visit times within a subject.
        let long_dup = "id,time,y,x1,x2\n1,0.5,1,0,0.0\n1,0.5,2,0,0.0\n";
        let err = load_dataset(
            &write_file(&dir, "l5.csv", long_dup),
            &write_file(&dir, "s5.csv", surv_short),
            &toy_spec(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("two longitudinal rows"), "{err}");

        // Duplicate subject in the survival file.
        let surv_dup = "id,time,status,w1,w2\n1,1.0,0,0,0\n1,2.0,1,0,0\n";
        let err = load_dataset(
            &write_file(&dir, "l6.csv", "id,time,y,x1,x2\n"),
            &write_file(&dir, "s6.csv", surv_dup),
            &toy_spec(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("more than once"), "{err}");
    }

    #[test]
    fn spec_validation_rejects_structural_mistakes() {
        let mut bad = toy_spec();
        bad.design.z1.push(DesignCol::Covar("nope".into()));
        assert!(validate_spec(&bad).is_err()); // z1 not a subset of x1

        let mut bad = toy_spec();
        bad.design.x1.push(DesignCol::Time);
        assert!(validate_spec(&bad).is_err()); // duplicate time column

        let mut bad = toy_spec();
        bad.baseline = BaselineSpec::Segments(0);
        assert!(validate_spec(&bad).is_err());

        let mut bad = toy_spec();
        bad.design.w2 = vec![DesignCol::Time];
        assert!(validate_spec(&bad).is_err()); // hazard covariates are time-fixed

        let mut bad = toy_spec();
        bad.priors.sigma_scale = -1.0;
        assert!(validate_spec(&bad).is_err());

        validate_spec(&toy_spec()).unwrap();
    }

    #[test]
    fn explicit_knots_must_cover_the_largest_observed_time() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = toy_spec();
        spec.baseline = BaselineSpec::Knots(vec![1.0]); // max time is 2.0
        let err = load_dataset(
            &write_file(&dir, "l.csv", LONG_OK),
            &write_file(&dir, "s.csv", SURV_OK),
            &spec,
        )
        .unwrap_err();
        assert!(matches!(err, HjmError::InvalidSpec(_)), "{err}");

        spec.baseline = BaselineSpec::Knots(vec![1.0, 2.5]);
        let ds = load_dataset(
            &write_file(&dir, "l2.csv", LONG_OK),
            &write_file(&dir, "s2.csv", SURV_OK),
            &spec,
        )
        .unwrap();
        assert_eq!(ds.knots, vec![1.0, 2.5]);
    }

    #[test]
    fn non_numeric_ids_fall_back_to_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        let long = "id,time,y,x1,x2\nb,0.0,1,0,0.0\na,0.0,2,0,0.0\n";
        let surv = "id,time,status,w1,w2\nb,1.0,1,0,0\na,1.5,0,0,0\n";
        let ds = load_dataset(
            &write_file(&dir, "l.csv", long),
            &write_file(&dir, "s.csv", surv),
            &toy_spec(),
        )
        .unwrap();
        assert_eq!(ds.ids, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(ds.rows_of(0)[0].y, 2);
    }
}
