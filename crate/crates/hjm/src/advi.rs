//! Mean-field variational approximation of the joint posterior.
//!
//! The approximating family factorizes into a diagonal Gaussian over the
//! unconstrained continuous block and an independent two-point factor per
//! censored subject for its latent susceptibility state. The evidence
//! lower bound (ELBO) splits the same way: the susceptibility expectation
//! is a two-point sum taken exactly — the survival log likelihood is
//! linear in the susceptibility weight, so averaging the indicator is the
//! same as evaluating at a fractional weight — while the continuous
//! expectation is estimated with reparameterized Monte Carlo draws. Both
//! entropy terms are closed-form, so the only stochastic piece of the
//! objective is the joint-density average, and the same fused gradient
//! that drives the Hamiltonian sampler drives the stochastic ascent here.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::AdviConfig;
use crate::posterior::Posterior;
use crate::sampler::{constrained_names, ParamSummary, Target};
use crate::util::{mean, quantile_sorted, stream_rng, streams, variance};
use crate::{HjmError, Result};

/// Keeps the two-point factors strictly inside the open unit interval so
/// their entropies stay finite.
const PHI_CLAMP: f64 = 1e-12;

/// A fitted mean-field approximation: Gaussian location and log scale per
/// unconstrained coordinate, the cured-state probability per censored
/// subject, and the per-step objective trace of the fit that produced it.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    /// q(C_i = 0) — the approximate probability that a censored subject is
    /// cured — in censored-subject order. Empty when the model has no cure
    /// split.
    pub phi: Vec<f64>,
    /// One objective estimate per optimization step actually taken.
    pub elbo_trace: Vec<f64>,
}

impl VariationalState {
    /// Expected susceptibility indicator per subject under the two-point
    /// factors: subjects with events are pinned susceptible at one, each
    /// censored subject carries `1 - q(cured)`. These are both the
    /// fractional weights the objective needs and the reported posterior
    /// means of the cure states.
    pub fn susceptibility_weights(&self, post: &Posterior) -> Vec<f64> {
        let mut w = vec![1.0; post.n_subjects()];
        for (k, i) in censored_indices(post).into_iter().enumerate() {
            if let Some(&p) = self.phi.get(k) {
                w[i] = 1.0 - p;
            }
        }
        w
    }
}

/// Subject indices without an observed event, in subject order; these are
/// the subjects that own a two-point factor when the cure split is active.
fn censored_indices(post: &Posterior) -> Vec<usize> {
    post.event_indicator()
        .iter()
        .enumerate()
        .filter(|&(_, &d)| d == 0)
        .map(|(i, _)| i)
        .collect()
}

/// Entropy of the diagonal Gaussian factor: the sum of the log scales plus
/// a fixed constant per dimension. Exact, never estimated.
fn gaussian_entropy(log_sigma: &[f64]) -> f64 {
    let d = log_sigma.len() as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    log_sigma.iter().sum::<f64>() + 0.5 * d * (1.0 + ln_2pi)
}

/// Entropy of one two-point factor with probability `p`.
fn two_point_entropy(p: f64) -> f64 {
    let q = 1.0 - p;
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if q > 0.0 {
        h -= q * q.ln();
    }
    h
}

/// One reparameterized draw of the target: samples `z`, forms
/// `w = mu + exp(log_sigma) ∘ z`, and evaluates the log density with its
/// gradient. A non-finite value is redrawn once; `None` means both
/// attempts failed.
fn draw_value<T: Target>(
    target: &T,
    mu: &[f64],
    log_sigma: &[f64],
    z: &mut [f64],
    w: &mut [f64],
    grad: &mut [f64],
    rng: &mut ChaCha8Rng,
) -> Option<f64> {
    for _attempt in 0..2 {
        for k in 0..mu.len() {
            z[k] = rng.sample(StandardNormal);
            w[k] = mu[k] + log_sigma[k].exp() * z[k];
        }
        if let Ok(v) = target.log_density_grad(w, grad) {
            if v.is_finite() {
                return Some(v);
            }
        }
    }
    None
}

/// Monte Carlo ELBO of a Gaussian factor against an arbitrary target: the
/// average of `n_mc` reparameterized density draws plus the exact Gaussian
/// entropy. A draw that stays non-finite after its one retry is an error.
fn elbo_gaussian<T: Target>(
    target: &T,
    mu: &[f64],
    log_sigma: &[f64],
    n_mc: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let d = mu.len();
    let (mut z, mut w, mut grad) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    for _ in 0..n_mc {
        match draw_value(target, mu, log_sigma, &mut z, &mut w, &mut grad, rng) {
            Some(v) => total += v,
            None => {
                return Err(HjmError::Numeric {
                    coord: None,
                    msg: "objective draw stayed non-finite after one retry".into(),
                })
            }
        }
    }
    Ok(total / n_mc as f64 + gaussian_entropy(log_sigma))
}

/// Monte Carlo evidence lower bound of `state` for the joint model: the
/// reparameterized average of the fractionally weighted joint density plus
/// the exact entropies of both factor blocks.
pub fn elbo_estimate(
    state: &VariationalState,
    post: &Posterior,
    n_mc: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(HjmError::Domain("n_mc must be at least 1".into()));
    }
    if state.mu.len() != post.dim() || state.log_sigma.len() != post.dim() {
        return Err(HjmError::Domain(format!(
            "variational state has {} coordinates, the model {}",
            state.mu.len(),
            post.dim()
        )));
    }
    let n_censored = censored_indices(post).len();
    if !post.no_cure() && state.phi.len() != n_censored {
        return Err(HjmError::Domain(format!(
            "{} cure factors for {} censored subjects",
            state.phi.len(),
            n_censored
        )));
    }
    let weights = state.susceptibility_weights(post);
    let target = FixedWeight { post, weights: &weights };
    let core = elbo_gaussian(&target, &state.mu, &state.log_sigma, n_mc, rng)?;
    Ok(core + state.phi.iter().map(|&p| two_point_entropy(p)).sum::<f64>())
}

/// Posterior with a frozen fractional susceptibility assignment.
struct FixedWeight<'a> {
    post: &'a Posterior,
    weights: &'a [f64],
}

impl Target for FixedWeight<'_> {
    fn dim(&self) -> usize {
        self.post.dim()
    }
    fn log_density_grad(&self, w: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.post.log_density_grad_weighted(w, self.weights, grad)
    }
}

/// Joint-model target whose susceptibility weights track the current
/// two-point factors. Interior mutability lets the per-step refresh update
/// the weights while the optimizer holds the target.
struct WeightedTarget<'a> {
    post: &'a Posterior,
    censored: Vec<usize>,
    phi: RefCell<Vec<f64>>,
    weights: RefCell<Vec<f64>>,
}

impl WeightedTarget<'_> {
    /// Coordinate update of the two-point factors: each censored subject's
    /// cured probability is its exact conditional — the same law the Gibbs
    /// sweep draws from — evaluated at the Gaussian factor's mean. Under
    /// the no-cure reduction there is nothing to update.
    fn refresh(&self, mu: &[f64]) {
        if self.post.no_cure() {
            return;
        }
        let probs = self.post.cured_probs(mu);
        let mut phi = self.phi.borrow_mut();
        let mut weights = self.weights.borrow_mut();
        for (k, &i) in self.censored.iter().enumerate() {
            let p = probs[i].clamp(PHI_CLAMP, 1.0 - PHI_CLAMP);
            phi[k] = p;
            weights[i] = 1.0 - p;
        }
    }

    fn entropy(&self) -> f64 {
        self.phi.borrow().iter().map(|&p| two_point_entropy(p)).sum()
    }
}

impl Target for WeightedTarget<'_> {
    fn dim(&self) -> usize {
        self.post.dim()
    }
    fn log_density_grad(&self, w: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.post.log_density_grad_weighted(w, &self.weights.borrow(), grad)
    }
}

/// Stochastic ascent of the Gaussian factor against `target`.
///
/// Each step draws `n_mc` reparameterized samples, averages the density
/// gradient over the finite ones, adds the exact entropy gradient (one per
/// log-scale coordinate), and takes an Adam step whose base rate decays
/// like the inverse square root of elapsed steps, so the iterates settle
/// instead of rattling at the optimizer's noise floor. `per_step` runs
/// before each step with the current location and returns the entropy of
/// any factors it maintains outside the Gaussian block.
///
/// The recorded objective is the draw average plus all entropies; a step
/// whose draws all fail records negative infinity and leaves the iterate
/// unchanged. Five hundred straight steps that each fail to improve on the
/// previous value abort the fit: that pattern means the iterates have run
/// away, and a smaller learning rate is the fix. Convergence is declared
/// when consecutive 100-step averages of the trace agree to within 0.01%.
fn maximize<T: Target>(
    target: &T,
    mu0: &[f64],
    steps: usize,
    n_mc: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
    mut per_step: impl FnMut(&[f64]) -> f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = mu0.len();
    let mut mu = mu0.to_vec();
    let mut log_sigma = vec![-1.0; d];
    let (mut z, mut w, mut grad) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let (mut g_mu, mut g_ls) = (vec![0.0; d], vec![0.0; d]);
    // Adam moments over the concatenated (mu, log_sigma) vector.
    let (mut m1, mut m2) = (vec![0.0; 2 * d], vec![0.0; 2 * d]);
    let (b1, b2, tiny): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut trace: Vec<f64> = Vec::with_capacity(steps);
    let mut declines = 0usize;

    for t in 0..steps {
        let extra_entropy = per_step(&mu);
        g_mu.fill(0.0);
        g_ls.fill(0.0);
        let mut value_sum = 0.0;
        let mut n_finite = 0usize;
        for _ in 0..n_mc {
            if let Some(v) =
                draw_value(target, &mu, &log_sigma, &mut z, &mut w, &mut grad, rng)
            {
                value_sum += v;
                n_finite += 1;
                for k in 0..d {
                    g_mu[k] += grad[k];
                    g_ls[k] += grad[k] * z[k] * log_sigma[k].exp();
                }
            }
        }

        let elbo = if n_finite == n_mc {
            value_sum / n_mc as f64 + gaussian_entropy(&log_sigma) + extra_entropy
        } else {
            f64::NEG_INFINITY
        };
        let declined = !elbo.is_finite() || trace.last().is_some_and(|&prev| elbo < prev);
        declines = if declined { declines + 1 } else { 0 };
        trace.push(elbo);
        if declines >= 500 {
            return Err(HjmError::LearningRate(
                "objective fell for 500 consecutive steps; reduce the learning rate".into(),
            ));
        }

        if n_finite > 0 {
            let scale = 1.0 / n_finite as f64;
            let lr_t = lr / (1.0 + t as f64 / 100.0).sqrt();
            let correct1 = 1.0 - b1.powi(t as i32 + 1);
            let correct2 = 1.0 - b2.powi(t as i32 + 1);
            for k in 0..2 * d {
                // Ascent direction: density gradient plus the exact
                // entropy gradient, which is one per log-scale coordinate.
                let g = if k < d { g_mu[k] * scale } else { g_ls[k - d] * scale + 1.0 };
                m1[k] = b1 * m1[k] + (1.0 - b1) * g;
                m2[k] = b2 * m2[k] + (1.0 - b2) * g * g;
                let step = lr_t * (m1[k] / correct1) / ((m2[k] / correct2).sqrt() + tiny);
                if k < d {
                    mu[k] += step;
                } else {
                    log_sigma[k - d] += step;
                }
            }
        }

        let done = t + 1;
        if done >= 200 && done % 100 == 0 {
            let new = mean(&trace[done - 100..done]);
            let old = mean(&trace[done - 200..done - 100]);
            if new.is_finite() && old.is_finite() && (new - old).abs() < 1e-4 * old.abs().max(1e-8)
            {
                break;
            }
        }
    }
    Ok((mu, log_sigma, trace))
}

/// Fits the mean-field approximation by stochastic ascent of the ELBO.
///
/// The Gaussian factor starts at the same data-scaled point the sampler
/// jitters around, with every scale at `exp(-1)`; the two-point factors
/// are refreshed before each step by their exact conditional at the
/// current Gaussian mean. Runs for `cfg.steps` steps or until the trace
/// converges, whichever comes first; everything is deterministic given
/// `seed`.
pub fn fit_advi(post: &Posterior, cfg: &AdviConfig, seed: u64) -> Result<VariationalState> {
    if cfg.steps == 0 {
        return Err(HjmError::Config("steps must be at least 1".into()));
    }
    if cfg.mc_samples == 0 {
        return Err(HjmError::Config("mc_samples must be at least 1".into()));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(HjmError::Config("learning_rate must be positive".into()));
    }
    let mut rng = stream_rng(seed, streams::ADVI);
    let censored = censored_indices(post);
    let n_phi = if post.no_cure() { 0 } else { censored.len() };
    let target = WeightedTarget {
        post,
        censored,
        phi: RefCell::new(vec![0.5; n_phi]),
        weights: RefCell::new(vec![1.0; post.n_subjects()]),
    };
    let mu0 = crate::sampler::init_base(post);
    let (mu, log_sigma, elbo_trace) = maximize(
        &target,
        &mu0,
        cfg.steps,
        cfg.mc_samples,
        cfg.learning_rate,
        &mut rng,
        |loc| {
            target.refresh(loc);
            target.entropy()
        },
    )?;
    Ok(VariationalState { mu, log_sigma, phi: target.phi.into_inner(), elbo_trace })
}

/// Summaries of the fitted approximation on the constrained scale,
/// computed from `n_draws` independent parameter draws. The draws carry no
/// serial structure, so the chain-convergence fields stay absent.
pub fn variational_summaries(
    state: &VariationalState,
    post: &Posterior,
    n_draws: usize,
    seed: u64,
) -> Vec<ParamSummary> {
    let names = constrained_names(post);
    let layout = post.layout();
    let d = post.dim();
    let mut rng = stream_rng(seed, streams::ADVI_DRAWS);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n_draws); names.len()];
    let mut w = vec![0.0; d];
    for _ in 0..n_draws {
        for k in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            w[k] = state.mu[k] + state.log_sigma[k].exp() * z;
        }
        let (theta, _, _) = post.from_unconstrained(&w);
        let mut flat = theta.flatten(layout);
        flat.extend(theta.derived().into_iter().map(|(_, v)| v));
        for (col, value) in cols.iter_mut().zip(flat) {
            col.push(value);
        }
    }
    names
        .into_iter()
        .zip(cols)
        .map(|(name, mut xs)| {
            let m = mean(&xs);
            let sd = variance(&xs).sqrt();
            xs.sort_by(f64::total_cmp);
            ParamSummary {
                name,
                mean: m,
                sd,
                q2_5: quantile_sorted(&xs, 0.025),
                q50: quantile_sorted(&xs, 0.5),
                q97_5: quantile_sorted(&xs, 0.975),
                rhat: None,
                ess: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SamplerConfig;
    use crate::data::{build_dataset, ModelSpec};
    use crate::hurdle::Family;
    use crate::sampler::{run_sampler, summarize};
    use crate::sim::{simulate, SimScenario};
    use approx::assert_relative_eq;

    fn sim_posterior(n: usize, seed: u64) -> Posterior {
        let sc = SimScenario::preset("table2", n).expect("preset");
        let out = simulate(&sc, seed).expect("simulate");
        let spec = ModelSpec::default_simulation(Family::Zinb);
        let ds = build_dataset(&spec, &out.raw).expect("dataset");
        Posterior::new(&ds, &spec).expect("posterior")
    }

    fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
    }

    /// One-dimensional normal likelihood with a normal prior: the posterior
    /// and the evidence are closed-form, and with the variational factor
    /// set to the exact posterior the objective integrand is constant, so
    /// every Monte Carlo draw must return the evidence itself.
    struct ConjugateNormal {
        ys: Vec<f64>,
        lik_sd: f64,
        prior_sd: f64,
    }

    impl ConjugateNormal {
        fn posterior(&self) -> (f64, f64) {
            let precision =
                self.ys.len() as f64 / self.lik_sd.powi(2) + 1.0 / self.prior_sd.powi(2);
            let var = 1.0 / precision;
            let mean = var * self.ys.iter().sum::<f64>() / self.lik_sd.powi(2);
            (mean, var)
        }

        fn log_joint(&self, theta: f64) -> f64 {
            let lik: f64 =
                self.ys.iter().map(|&y| ln_normal(y, theta, self.lik_sd.powi(2))).sum();
            lik + ln_normal(theta, 0.0, self.prior_sd.powi(2))
        }

        fn log_evidence(&self) -> f64 {
            let (m, v) = self.posterior();
            self.log_joint(0.0) - ln_normal(0.0, m, v)
        }
    }

    impl Target for ConjugateNormal {
        fn dim(&self) -> usize {
            1
        }
        fn log_density_grad(&self, w: &[f64], grad: &mut [f64]) -> Result<f64> {
            let theta = w[0];
            grad[0] = self.ys.iter().map(|&y| y - theta).sum::<f64>() / self.lik_sd.powi(2)
                - theta / self.prior_sd.powi(2);
            Ok(self.log_joint(theta))
        }
    }

    /// Density identically one: the objective must reduce to the exact
    /// Gaussian entropy, with no Monte Carlo noise at all.
    struct FlatTarget {
        d: usize,
    }

    impl Target for FlatTarget {
        fn dim(&self) -> usize {
            self.d
        }
        fn log_density_grad(&self, _w: &[f64], grad: &mut [f64]) -> Result<f64> {
            grad.fill(0.0);
            Ok(0.0)
        }
    }

    #[test]
    fn conjugate_posterior_turns_the_objective_into_the_evidence() {
        let toy = ConjugateNormal {
            ys: vec![3.1, 2.7, 3.6, 3.3, 2.9, 3.4, 3.0, 3.2],
            lik_sd: 1.0,
            prior_sd: 2.0,
        };
        let (m, v) = toy.posterior();
        let log_z = toy.log_evidence();
        // With q equal to the exact posterior the integrand of the
        // objective is constant: joint minus posterior density is the
        // evidence at every point, not just on average.
        for theta in [-1.0, 0.4, m, m + 2.0 * v.sqrt(), 5.0] {
            let ratio = toy.log_joint(theta) - ln_normal(theta, m, v);
            assert_relative_eq!(ratio, log_z, max_relative = 1e-10);
        }
        // The estimator replaces the entropy integral with its closed
        // form, so its only noise is the density average: variance of
        // half a squared standard normal over the draw count.
        let n_mc = 400;
        let se = (0.5 / n_mc as f64).sqrt();
        for seed in [1u64, 2, 3] {
            let mut rng = stream_rng(seed, streams::ADVI);
            let elbo =
                elbo_gaussian(&toy, &[m], &[0.5 * v.ln()], n_mc, &mut rng).expect("finite");
            assert!(
                (elbo - log_z).abs() < 3.5 * se,
                "elbo {elbo} vs evidence {log_z} (se {se})"
            );
        }
        // Any other Gaussian must fall below the evidence on average.
        let mut rng = stream_rng(9, streams::ADVI);
        let worse =
            elbo_gaussian(&toy, &[m + 1.0], &[0.5 * v.ln()], 200, &mut rng).expect("finite");
        assert!(worse < log_z);
    }

    #[test]
    fn conjugate_fit_recovers_the_exact_posterior() {
        let toy = ConjugateNormal {
            ys: vec![3.1, 2.7, 3.6, 3.3, 2.9, 3.4, 3.0, 3.2],
            lik_sd: 1.0,
            prior_sd: 2.0,
        };
        let (m, v) = toy.posterior();
        let mut rng = stream_rng(17, streams::ADVI);
        let (mu, log_sigma, trace) =
            maximize(&toy, &[0.0], 4000, 10, 0.03, &mut rng, |_| 0.0).expect("fit");
        assert!((mu[0] - m).abs() < 0.01 * m.abs(), "mean {} vs {m}", mu[0]);
        assert!(
            (log_sigma[0].exp() - v.sqrt()).abs() < 0.05 * v.sqrt(),
            "sd {} vs {}",
            log_sigma[0].exp(),
            v.sqrt()
        );
        // The trace should have climbed toward the evidence and stayed
        // below it on average.
        let tail = mean(&trace[trace.len() - 100..]);
        assert!(tail > trace[0]);
        assert!(tail <= toy.log_evidence() + 0.05);
    }

    #[test]
    fn flat_target_objective_is_exactly_the_entropy() {
        let flat = FlatTarget { d: 7 };
        let mut rng = stream_rng(4, streams::ADVI);
        let mu: Vec<f64> = (0..7).map(|_| rng.gen::<f64>() - 0.5).collect();
        let log_sigma: Vec<f64> = (0..7).map(|_| 2.0 * (rng.gen::<f64>() - 0.5)).collect();
        let elbo = elbo_gaussian(&flat, &mu, &log_sigma, 9, &mut rng).expect("finite");
        assert_relative_eq!(elbo, gaussian_entropy(&log_sigma), max_relative = 1e-12);
    }

    /// Builds a variational state centered on a mildly perturbed version of
    /// the sampler's starting point, with the cure factors set by their
    /// exact conditional at that center.
    fn handmade_state(post: &Posterior, log_sigma: f64, perturb_seed: u64) -> VariationalState {
        let mut rng = stream_rng(perturb_seed, 0);
        let mut mu = crate::sampler::init_base(post);
        for m in &mut mu {
            *m += 0.2 * (rng.gen::<f64>() - 0.5);
        }
        let probs = post.cured_probs(&mu);
        let phi: Vec<f64> = censored_indices(post)
            .into_iter()
            .map(|i| probs[i].clamp(PHI_CLAMP, 1.0 - PHI_CLAMP))
            .collect();
        VariationalState {
            log_sigma: vec![log_sigma; post.dim()],
            mu,
            phi,
            elbo_trace: vec![],
        }
    }

    #[test]
    fn degenerate_scales_reduce_the_objective_to_a_point_evaluation() {
        let post = sim_posterior(12, 5);
        let state = handmade_state(&post, (1e-6f64).ln(), 11);
        let weights = state.susceptibility_weights(&post);
        let direct = post.log_density_weighted(&state.mu, &weights).expect("finite")
            + gaussian_entropy(&state.log_sigma)
            + state.phi.iter().map(|&p| two_point_entropy(p)).sum::<f64>();
        let mut rng = stream_rng(6, streams::ADVI);
        let elbo = elbo_estimate(&state, &post, 5, &mut rng).expect("finite");
        assert!((elbo - direct).abs() < 0.05, "elbo {elbo} vs direct {direct}");
    }

    #[test]
    fn estimator_variance_shrinks_with_the_sample_count() {
        let post = sim_posterior(12, 5);
        let state = handmade_state(&post, -2.0, 11);
        let singles: Vec<f64> = (0..40)
            .map(|k| {
                let mut rng = stream_rng(1000 + k, streams::ADVI);
                elbo_estimate(&state, &post, 1, &mut rng).expect("finite")
            })
            .collect();
        let sd1 = variance(&singles).sqrt();
        let mut rng = stream_rng(2000, streams::ADVI);
        let est100 = elbo_estimate(&state, &post, 100, &mut rng).expect("finite");
        let se_diff = (sd1 * sd1 * (1.0 + 1.0 / 100.0)).sqrt();
        assert!(
            (singles[0] - est100).abs() < 3.0 * se_diff,
            "single {} vs averaged {est100}, spread {sd1}",
            singles[0]
        );
    }

    #[test]
    fn cure_factors_follow_the_exact_conditional_at_the_mean() {
        let post = sim_posterior(15, 8);
        let censored = censored_indices(&post);
        assert!(!censored.is_empty());
        let target = WeightedTarget {
            post: &post,
            censored: censored.clone(),
            phi: RefCell::new(vec![0.5; censored.len()]),
            weights: RefCell::new(vec![1.0; post.n_subjects()]),
        };
        let mut rng = stream_rng(3, 0);
        let mut mu = crate::sampler::init_base(&post);
        for m in &mut mu {
            *m += 0.3 * (rng.gen::<f64>() - 0.5);
        }
        target.refresh(&mu);
        let probs = post.cured_probs(&mu);
        let phi = target.phi.borrow();
        let weights = target.weights.borrow();
        for (k, &i) in censored.iter().enumerate() {
            assert_eq!(phi[k], probs[i].clamp(PHI_CLAMP, 1.0 - PHI_CLAMP));
            assert_eq!(weights[i], 1.0 - phi[k]);
            assert!(phi[k] > 0.0 && phi[k] < 1.0);
        }
        for (i, &d) in post.event_indicator().iter().enumerate() {
            if d == 1 {
                assert_eq!(weights[i], 1.0);
            }
        }
    }

    #[test]
    fn simulated_fit_climbs_and_is_reproducible() {
        let post = sim_posterior(40, 21);
        let cfg = AdviConfig {
            steps: 1500,
            mc_samples: 5,
            learning_rate: 0.05,
            draws: 200,
        };
        let fit = fit_advi(&post, &cfg, 31).expect("fit");
        assert!(!fit.elbo_trace.is_empty());
        assert!(fit.elbo_trace.len() <= cfg.steps);
        let n = fit.elbo_trace.len();
        assert!(n >= 200, "stopped after only {n} steps");
        let first = mean(&fit.elbo_trace[..100]);
        let last = mean(&fit.elbo_trace[n - 100..]);
        assert!(last > first, "trace fell from {first} to {last}");
        for &p in &fit.phi {
            assert!(p > 0.0 && p < 1.0);
        }

        let again = fit_advi(&post, &cfg, 31).expect("fit");
        assert_eq!(fit.mu, again.mu);
        assert_eq!(fit.log_sigma, again.log_sigma);
        assert_eq!(fit.elbo_trace, again.elbo_trace);

        let summaries = variational_summaries(&fit, &post, cfg.draws, 31);
        assert_eq!(
            summaries.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
            constrained_names(&post)
        );
        for s in &summaries {
            assert!(s.rhat.is_none() && s.ess.is_none());
            assert!(s.sd >= 0.0);
            assert!(s.q2_5 <= s.q50 && s.q50 <= s.q97_5);
        }
    }

    #[test]
    fn runaway_learning_rate_is_reported() {
        let post = sim_posterior(12, 5);
        let cfg = AdviConfig {
            steps: 3000,
            mc_samples: 1,
            learning_rate: 1e4,
            draws: 10,
        };
        match fit_advi(&post, &cfg, 2) {
            Err(HjmError::LearningRate(_)) => {}
            other => panic!("expected a learning-rate failure, got {other:?}"),
        }
    }

    #[test]
    fn approximation_tracks_the_sampler_on_count_coefficients() {
        let post = sim_posterior(60, 33);
        let hmc_cfg = SamplerConfig {
            chains: 2,
            iterations: 1200,
            warmup: 600,
            ..SamplerConfig::default()
        };
        let draws = run_sampler(&post, &hmc_cfg, 19).expect("run");
        let hmc = summarize(&draws);
        let advi_cfg = AdviConfig {
            steps: 4000,
            mc_samples: 10,
            learning_rate: 0.05,
            draws: 400,
        };
        let fit = fit_advi(&post, &advi_cfg, 23).expect("fit");
        let approx = variational_summaries(&fit, &post, advi_cfg.draws, 23);
        let mut checked = 0;
        for (h, a) in hmc.iter().zip(&approx) {
            assert_eq!(h.name, a.name);
            if h.name.starts_with("beta1") {
                assert!(
                    (a.mean - h.mean).abs() < 3.0 * h.sd,
                    "{}: approximation {} vs sampler {} (sd {})",
                    h.name,
                    a.mean,
                    h.mean,
                    h.sd
                );
                checked += 1;
            }
        }
        assert!(checked >= 3);
    }
}
