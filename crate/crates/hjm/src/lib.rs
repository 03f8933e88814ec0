//! Bayesian joint models for zero-inflated longitudinal counts and
//! time-to-event outcomes with a cure fraction.
//!
//! The model couples two submodels through shared linear predictors:
//!
//! * a **hurdle** model for repeated count measurements: a logistic component
//!   for structural zeros and a zero-truncated Poisson or negative binomial
//!   component for positive counts, both with subject-level random effects
//!   ([`hurdle`]);
//! * a **mixture-cure** survival model: a logistic incidence component decides
//!   whether a subject is cured, and uncured subjects face a
//!   piecewise-constant baseline hazard scaled by the current values of both
//!   longitudinal predictors ([`cure`]).
//!
//! Inference is fully Bayesian. The continuous block is sampled with the
//! no-U-turn sampler while the latent cure indicators are refreshed by exact
//! Gibbs steps ([`sampler`]); a mean-field variational approximation is
//! available as a fast alternative ([`advi`]). Fitted models feed dynamic
//! risk predictions for new subjects ([`predict`]) and time-dependent
//! discrimination / calibration summaries ([`metrics`]). A simulation engine
//! ([`sim`]) generates data from the exact generative process for calibration
//! studies, and [`cli`] wires everything into the `hjm` command-line tool.
//!
//! # Quick start
//!
//! ```
//! use hjm::hurdle::{log_hurdle_pmf, Family};
//!
//! // Probability of observing the count 3 under a hurdle model whose
//! // structural-zero predictor is -1.5 (zeros are uncommon) and whose
//! // positive-count predictor gives a mean rate of exp(1.0).
//! let lp = log_hurdle_pmf(3, 1.0, -1.5, Family::Zip, None).unwrap();
//! assert!(lp < 0.0 && lp.is_finite());
//! ```

pub mod advi;
pub mod cli;
pub mod config;
pub mod cure;
pub mod data;
pub mod hurdle;
pub mod metrics;
pub mod posterior;
pub mod predict;
pub mod sim;
pub mod util;

mod book;

pub mod sampler;

pub use config::RunConfig;
pub use data::JointDataset;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI maps them to exit codes:
/// configuration/data problems (exit 2), numeric failures (exit 3) and
/// internal errors (exit 4).
#[derive(Debug, Error)]
pub enum HjmError {
    /// A required column is absent or a header does not match the schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell failed to parse; carries the 1-based data row number.
    #[error("parse error at data row {row}: {msg}")]
    Parse { row: usize, msg: String },

    /// Cross-file or within-file consistency violation (ids, times, status).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// The model specification itself is invalid (knots, design columns).
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    /// Configuration file problems (unknown keys, bad values).
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value appeared where a finite one is required.
    /// `coord` identifies the offending coordinate where known.
    #[error("numeric failure at coordinate {coord:?}: {msg}")]
    Numeric { coord: Option<usize>, msg: String },

    /// Sampler could not leave its initialization region.
    #[error("initialization failure: {0}")]
    InitFailure(String),

    /// Variational objective diverged; the step size is too large.
    #[error("learning-rate failure: {0}")]
    LearningRate(String),

    /// A random-walk proposal scale could not be tuned: no proposal was
    /// accepted during the adaptation window.
    #[error("step-scale failure: {0}")]
    StepScale(String),

    /// Underlying I/O error.
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenient result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, HjmError>;
