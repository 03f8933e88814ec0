//! Run configuration: one JSON document drives every command.
//!
//! The schema is strict — unknown keys are rejected, so typos fail loudly
//! instead of silently using a default. Every field has a default; an empty
//! object `{}` is a complete, runnable configuration (simulate a ZINB
//! dataset, fit it with NUTS, predict at landmarks 0/0.5/1). The effective
//! configuration, defaults included, can be printed with `--show-config`.
//!
//! All randomness flows from the single top-level `seed`; modules derive
//! independent sub-streams from it, so reruns with the same configuration
//! and inputs are bit-for-bit reproducible regardless of thread count.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BaselineSpec, DesignCol, DesignInfo, ModelSpec, Priors};
use crate::hurdle::Family;
use crate::{HjmError, Result};

/// Fitting method: the blocked NUTS-within-Gibbs sampler or mean-field
/// variational inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nuts,
    Advi,
}

/// Design block column lists, in configuration spelling (`"intercept"`,
/// `"time"`, or a covariate column name).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    pub x1: Vec<String>,
    pub z1: Vec<String>,
    pub x2: Vec<String>,
    pub z2: Vec<String>,
    pub w1: Vec<String>,
    pub w2: Vec<String>,
}

impl Default for DesignConfig {
    fn default() -> Self {
        let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect();
        DesignConfig {
            x1: v(&["intercept", "time", "x1", "x2"]),
            z1: v(&["intercept", "time"]),
            x2: v(&["intercept", "time", "x1"]),
            z2: v(&["intercept"]),
            w1: v(&["intercept", "w1"]),
            w2: v(&["w1", "w2"]),
        }
    }
}

impl DesignConfig {
    fn to_design_info(&self) -> DesignInfo {
        let conv = |cols: &[String]| cols.iter().map(|s| DesignCol::parse(s)).collect();
        DesignInfo {
            x1: conv(&self.x1),
            z1: conv(&self.z1),
            x2: conv(&self.x2),
            z2: conv(&self.z2),
            w1: conv(&self.w1),
            w2: conv(&self.w2),
        }
    }
}

/// Baseline-hazard segmentation: explicit `knots` or a number of `segments`
/// placed by the event-time quantile rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, untagged)]
pub enum BaselineConfig {
    Knots { knots: Vec<f64> },
    Segments {
        segments: usize,
        #[serde(default)]
        rule: KnotRule,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotRule {
    #[default]
    Quantile,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig::Segments { segments: 1, rule: KnotRule::Quantile }
    }
}

/// Optional overrides of the default prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorsConfig {
    pub beta_sd: Option<f64>,
    pub xi_sd: Option<f64>,
    pub alpha_sd: Option<f64>,
    pub h_shape: Option<f64>,
    pub h_rate: Option<f64>,
    pub r_shape: Option<f64>,
    pub r_rate: Option<f64>,
    pub sigma_scale: Option<f64>,
    pub lkj_eta: Option<f64>,
}

impl PriorsConfig {
    fn resolve(&self) -> Priors {
        let d = Priors::default();
        Priors {
            beta_sd: self.beta_sd.unwrap_or(d.beta_sd),
            xi_sd: self.xi_sd.unwrap_or(d.xi_sd),
            alpha_sd: self.alpha_sd.unwrap_or(d.alpha_sd),
            h_shape: self.h_shape.unwrap_or(d.h_shape),
            h_rate: self.h_rate.unwrap_or(d.h_rate),
            r_shape: self.r_shape.unwrap_or(d.r_shape),
            r_rate: self.r_rate.unwrap_or(d.r_rate),
            sigma_scale: self.sigma_scale.unwrap_or(d.sigma_scale),
            lkj_eta: self.lkj_eta.unwrap_or(d.lkj_eta),
        }
    }
}

/// Model block: count family, design mapping, baseline hazard and priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    /// How the longitudinal process enters the hazard. Only the
    /// current-value form (both predictors evaluated at the event time) is
    /// implemented.
    pub association: String,
    pub design: DesignConfig,
    pub baseline: BaselineConfig,
    pub priors: PriorsConfig,
    /// Force the cure mass to zero (verification switch).
    pub no_cure: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::Zinb,
            association: "current_value".into(),
            design: DesignConfig::default(),
            baseline: BaselineConfig::default(),
            priors: PriorsConfig::default(),
            no_cure: false,
        }
    }
}

/// Settings of the NUTS-within-Gibbs sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Total iterations per chain, warmup included.
    pub iterations: usize,
    pub warmup: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    /// Half-width of the uniform jitter applied to the unconstrained
    /// initial point of each chain.
    pub init_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 2,
            iterations: 2000,
            warmup: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            init_jitter: 2.0,
        }
    }
}

/// Settings of the mean-field variational approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdviConfig {
    /// Maximum number of stochastic gradient steps.
    pub steps: usize,
    /// Monte Carlo samples per gradient estimate.
    pub mc_samples: usize,
    pub learning_rate: f64,
    /// Number of posterior draws to sample from the fitted approximation
    /// for the standard output files.
    pub draws: usize,
}

impl Default for AdviConfig {
    fn default() -> Self {
        AdviConfig { steps: 5000, mc_samples: 10, learning_rate: 0.05, draws: 1000 }
    }
}

/// Prediction mode: plug-in at the conditional mean of the random effects
/// (first order) or full Monte Carlo over the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    FirstOrder,
    Mc,
}

/// How Monte Carlo prediction treats the subject-level random effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectsMode {
    /// Draw effects from their conditional posterior per parameter draw.
    Sampled,
    /// Hold effects at their conditional mean (collapses to the first-order
    /// predictor when parameter draws are degenerate).
    ConditionalMean,
}

/// Dynamic-prediction block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionConfig {
    /// Landmark times `s` at which predictions are issued.
    pub landmarks: Vec<f64>,
    /// Prediction window `t`: risk is evaluated over `(s, s + t]`.
    pub window: f64,
    /// Posterior draws used per prediction in Monte Carlo mode.
    pub draws: usize,
    pub mode: PredictionMode,
    pub effects: EffectsMode,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            landmarks: vec![0.0, 0.5, 1.0],
            window: 0.5,
            draws: 200,
            mode: PredictionMode::Mc,
            effects: EffectsMode::Sampled,
        }
    }
}

/// Simulation block: a named scenario preset, the number of subjects, and
/// optional overrides of individual true parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub preset: String,
    pub n_subjects: usize,
    pub overrides: SimOverrides,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            preset: "table2".into(),
            n_subjects: 500,
            overrides: SimOverrides::default(),
        }
    }
}

/// Optional per-parameter overrides applied on top of a simulation preset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOverrides {
    pub beta1: Option<Vec<f64>>,
    pub beta2: Option<Vec<f64>>,
    pub xi1: Option<Vec<f64>>,
    pub xi2: Option<Vec<f64>>,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub r: Option<f64>,
    /// Random-effect covariance of the count process, row-major 2x2.
    pub d_u: Option<Vec<f64>>,
    /// Random-intercept variance of the structural-zero process.
    pub sigma_b_sq: Option<f64>,
    /// Constant baseline hazard level.
    pub h0: Option<f64>,
    /// Administrative censoring time.
    pub tau: Option<f64>,
    /// Measurement grid step (grid runs 0, step, 2*step, ... up to tau).
    pub grid_step: Option<f64>,
}

/// Evaluation block: at which landmarks and window to score predictions,
/// how many bootstrap resamples for paired comparisons, and the optional
/// replication-summary inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub landmarks: Vec<f64>,
    pub window: f64,
    /// Paired-bootstrap resamples for model-comparison p-values.
    pub bootstrap: usize,
    /// Predictions of a second model to compare against, if any.
    pub compare: Option<String>,
    /// Replication mode: directories of per-replicate fit outputs to
    /// aggregate into an estimation-quality table.
    pub replicates: Vec<String>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            landmarks: vec![0.0, 0.5, 1.0],
            window: 0.5,
            bootstrap: 1000,
            compare: None,
            replicates: Vec::new(),
        }
    }
}

/// Input/output locations. Every file has a standard name under `out_dir`;
/// any of them can be pointed elsewhere individually.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: String,
    pub longitudinal: Option<String>,
    pub survival: Option<String>,
    pub truth: Option<String>,
    /// Validation-set inputs for `predict`/`evaluate`; default to the
    /// training files.
    pub validation_longitudinal: Option<String>,
    pub validation_survival: Option<String>,
    pub draws: Option<String>,
    pub summary: Option<String>,
    pub cure_post: Option<String>,
    pub predictions: Option<String>,
    pub metrics: Option<String>,
    pub integrated: Option<String>,
    pub estimation: Option<String>,
    pub elbo_trace: Option<String>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: "out".into(),
            longitudinal: None,
            survival: None,
            truth: None,
            validation_longitudinal: None,
            validation_survival: None,
            draws: None,
            summary: None,
            cure_post: None,
            predictions: None,
            metrics: None,
            integrated: None,
            estimation: None,
            elbo_trace: None,
        }
    }
}

impl PathsConfig {
    fn resolve(&self, explicit: &Option<String>, name: &str) -> PathBuf {
        match explicit {
            Some(p) => PathBuf::from(p),
            None => Path::new(&self.out_dir).join(name),
        }
    }

    pub fn longitudinal(&self) -> PathBuf {
        self.resolve(&self.longitudinal, "longitudinal.csv")
    }
    pub fn survival(&self) -> PathBuf {
        self.resolve(&self.survival, "survival.csv")
    }
    pub fn truth(&self) -> PathBuf {
        self.resolve(&self.truth, "truth.csv")
    }
    pub fn validation_longitudinal(&self) -> PathBuf {
        match &self.validation_longitudinal {
            Some(p) => PathBuf::from(p),
            None => self.longitudinal(),
        }
    }
    pub fn validation_survival(&self) -> PathBuf {
        match &self.validation_survival {
            Some(p) => PathBuf::from(p),
            None => self.survival(),
        }
    }
    pub fn draws(&self) -> PathBuf {
        self.resolve(&self.draws, "draws.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.resolve(&self.summary, "summary.json")
    }
    pub fn cure_post(&self) -> PathBuf {
        self.resolve(&self.cure_post, "cure_post.csv")
    }
    pub fn predictions(&self) -> PathBuf {
        self.resolve(&self.predictions, "predictions.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.resolve(&self.metrics, "metrics.csv")
    }
    pub fn integrated(&self) -> PathBuf {
        self.resolve(&self.integrated, "integrated.csv")
    }
    pub fn estimation(&self) -> PathBuf {
        self.resolve(&self.estimation, "estimation.csv")
    }
    pub fn elbo_trace(&self) -> PathBuf {
        self.resolve(&self.elbo_trace, "elbo_trace.csv")
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream in the program derives from it.
    pub seed: u64,
    /// Worker threads for chain/replication parallelism; 0 = all cores.
    /// Results are identical for any thread count.
    pub threads: usize,
    /// Fitting method used by the `fit` command.
    pub method: Method,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub advi: AdviConfig,
    pub prediction: PredictionConfig,
    pub simulation: SimulationConfig,
    pub evaluate: EvaluateConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 20260823,
            threads: 0,
            method: Method::Nuts,
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            advi: AdviConfig::default(),
            prediction: PredictionConfig::default(),
            simulation: SimulationConfig::default(),
            evaluate: EvaluateConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a configuration file, apply defaults, and validate.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Parse a configuration from a JSON string, apply defaults, validate.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| HjmError::Config(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration as pretty-printed JSON (for
    /// `--show-config`).
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Cross-field validation beyond what the schema can express.
    pub fn validate(&self) -> Result<()> {
        let s = &self.sampler;
        if s.chains == 0 {
            return Err(HjmError::Config("sampler.chains must be at least 1".into()));
        }
        if s.warmup >= s.iterations {
            return Err(HjmError::Config(format!(
                "sampler.warmup ({}) must be smaller than sampler.iterations ({})",
                s.warmup, s.iterations
            )));
        }
        if !(s.target_accept > 0.0 && s.target_accept < 1.0) {
            return Err(HjmError::Config(format!(
                "sampler.target_accept must lie strictly between 0 and 1, got {}",
                s.target_accept
            )));
        }
        if s.max_tree_depth == 0 || s.max_tree_depth > 15 {
            return Err(HjmError::Config(format!(
                "sampler.max_tree_depth must lie in 1..=15, got {}",
                s.max_tree_depth
            )));
        }
        if !(s.init_jitter >= 0.0) || !s.init_jitter.is_finite() {
            return Err(HjmError::Config("sampler.init_jitter must be finite and >= 0".into()));
        }
        if self.model.association != "current_value" {
            return Err(HjmError::Config(format!(
                "model.association: only \"current_value\" is implemented, got {:?}",
                self.model.association
            )));
        }
        let a = &self.advi;
        if a.steps == 0 || a.mc_samples == 0 || a.draws == 0 {
            return Err(HjmError::Config(
                "advi.steps, advi.mc_samples and advi.draws must be positive".into(),
            ));
        }
        if !(a.learning_rate > 0.0) {
            return Err(HjmError::Config("advi.learning_rate must be positive".into()));
        }
        for (what, landmarks, window) in [
            ("prediction", &self.prediction.landmarks, self.prediction.window),
            ("evaluate", &self.evaluate.landmarks, self.evaluate.window),
        ] {
            if landmarks.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(HjmError::Config(format!(
                    "{what}.landmarks must be finite and non-negative"
                )));
            }
            if !(window > 0.0) || !window.is_finite() {
                return Err(HjmError::Config(format!("{what}.window must be positive")));
            }
        }
        if self.prediction.draws == 0 {
            return Err(HjmError::Config("prediction.draws must be positive".into()));
        }
        if self.evaluate.bootstrap == 0 {
            return Err(HjmError::Config("evaluate.bootstrap must be positive".into()));
        }
        if let Some(d_u) = &self.simulation.overrides.d_u {
            if d_u.len() != 4 {
                return Err(HjmError::Config(
                    "simulation.overrides.d_u must be a row-major 2x2 matrix (4 values)".into(),
                ));
            }
        }
        // The model spec carries its own structural validation.
        crate::data::validate_spec(&self.model_spec()?)?;
        Ok(())
    }

    /// Convert the model block into the core [`ModelSpec`].
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let baseline = match &self.model.baseline {
            BaselineConfig::Knots { knots } => BaselineSpec::Knots(knots.clone()),
            BaselineConfig::Segments { segments, rule: KnotRule::Quantile } => {
                BaselineSpec::Segments(*segments)
            }
        };
        Ok(ModelSpec {
            family: self.model.family,
            design: self.model.design.to_design_info(),
            baseline,
            priors: self.model.priors.resolve(),
            no_cure: self.model.no_cure,
        })
    }
}
