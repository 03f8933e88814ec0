//! Posterior simulation for the joint model: exact conditional draws of the
//! susceptibility indicators alternating with No-U-turn transitions over
//! every continuous unknown.
//!
//! Each iteration first refreshes the indicator of every censored subject
//! from its exact Bernoulli conditional — events are pinned susceptible —
//! and then takes one Hamiltonian transition of the continuous coordinates
//! given those indicators. The indicators stay fixed inside a trajectory,
//! so the integrated density remains differentiable.
//!
//! Chains are independent and may run in parallel; each draws from its own
//! deterministic RNG stream, so results are reproducible regardless of
//! thread scheduling. Warmup follows the staged timetable of
//! [`AdaptSchedule`]: dual-averaged step sizes throughout, and diagonal
//! metric refreshes at the end of each doubling slow window. Only
//! post-warmup draws are stored.

pub mod diagnostics;
mod nuts;

pub use diagnostics::{ess_rank_normalized, split_rhat, summarize, ParamSummary};
pub use nuts::{
    find_reasonable_epsilon, nuts_transition, step_carry_over, AdaptSchedule, DiagMass,
    DualAverage, NutsOpts, RunningVariance, Target, TransitionStats, DIVERGENCE_THRESHOLD,
};

use rand::Rng;
use rayon::prelude::*;

use crate::config::SamplerConfig;
use crate::posterior::Posterior;
use crate::util::{stream_rng, streams, Matrix};
use crate::{HjmError, Result};

/// The posterior conditioned on fixed susceptibility indicators, seen as a
/// Hamiltonian target over the unconstrained coordinates.
struct Conditioned<'a> {
    post: &'a Posterior,
    cure: &'a [u8],
}

impl Target for Conditioned<'_> {
    fn dim(&self) -> usize {
        self.post.dim()
    }
    fn log_density_grad(&self, w: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.post.log_density_grad(w, self.cure, grad)
    }
}

/// Sampler statistics of one stored draw.
#[derive(Debug, Clone, Copy)]
pub struct IterStats {
    pub step_size: f64,
    pub depth: usize,
    pub n_leapfrog: usize,
    pub accept_stat: f64,
    pub divergent: bool,
    pub energy: f64,
}

/// Post-warmup output of one chain.
#[derive(Debug, Clone)]
pub struct ChainDraws {
    /// Draws in unconstrained coordinates, one row per kept iteration.
    pub unconstrained: Matrix,
    /// The same draws mapped to the named constrained parameters:
    /// primitives first, derived covariance summaries after.
    pub constrained: Matrix,
    /// Susceptibility indicators per kept iteration (0 = cured).
    pub cure: Matrix,
    pub stats: Vec<IterStats>,
    /// Number of divergent transitions after warmup.
    pub divergences: usize,
    /// Step size in force after adaptation.
    pub step_size: f64,
}

/// All chains of one run plus the stored parameter names.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn kept_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.stats.len())
    }

    /// Posterior mean of the susceptibility indicator per subject.
    pub fn cure_means(&self) -> Vec<f64> {
        let n = self.chains.first().map_or(0, |c| c.cure.cols);
        let mut out = vec![0.0; n];
        let mut total = 0.0;
        for c in &self.chains {
            for k in 0..c.cure.rows {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += c.cure.get(k, i);
                }
                total += 1.0;
            }
        }
        if total > 0.0 {
            out.iter_mut().for_each(|o| *o /= total);
        }
        out
    }

    /// Post-warmup divergence rate over all chains.
    pub fn divergence_rate(&self) -> f64 {
        let kept: usize = self.chains.iter().map(|c| c.stats.len()).sum();
        if kept == 0 {
            return 0.0;
        }
        let div: usize = self.chains.iter().map(|c| c.divergences).sum();
        div as f64 / kept as f64
    }

    /// Post-warmup mean acceptance statistic over all chains.
    pub fn mean_accept(&self) -> f64 {
        let stats: Vec<f64> = self
            .chains
            .iter()
            .flat_map(|c| c.stats.iter().map(|s| s.accept_stat))
            .collect();
        crate::util::mean(&stats)
    }
}

/// One exact conditional sweep of the susceptibility indicators.
///
/// `cured_probs[i]` is the conditional probability that subject `i` is
/// cured; events carry probability zero and stay susceptible. One uniform
/// variate is consumed per subject regardless of status, so the position
/// of the RNG stream does not depend on the outcome pattern.
pub fn gibbs_sweep<R: Rng>(cured_probs: &[f64], events: &[u8], rng: &mut R) -> Vec<u8> {
    cured_probs
        .iter()
        .zip(events)
        .map(|(&p, &d)| {
            let u: f64 = rng.gen();
            u8::from(d == 1 || u >= p)
        })
        .collect()
}

/// Names of the stored constrained columns: primitive parameters first,
/// derived covariance summaries after.
pub fn constrained_names(post: &Posterior) -> Vec<String> {
    let mut names = post.layout().names();
    let probe = post.from_unconstrained(&vec![0.0; post.dim()]).0;
    names.extend(probe.derived().into_iter().map(|(n, _)| n));
    names
}

/// Center of the initialization jitter: log baseline-hazard coordinates
/// start at the observed event rate per segment (a half-event floor keeps
/// eventless segments finite), everything else at zero — which puts the
/// scales σ and the dispersion at one.
pub(crate) fn init_base(post: &Posterior) -> Vec<f64> {
    let mut base = vec![0.0; post.dim()];
    let (events, exposure) = post.segment_totals();
    for (q, slot) in post.layout().log_h().enumerate() {
        if exposure[q] > 0.0 {
            base[slot] = (events[q].max(0.5) / exposure[q]).ln();
        }
    }
    base
}

/// Starting susceptibility indicators: events susceptible, censored
/// subjects a fair coin (all susceptible when the cure split is disabled).
fn init_cure<R: Rng>(post: &Posterior, rng: &mut R) -> Vec<u8> {
    post.event_indicator()
        .iter()
        .map(|&d| {
            let coin = rng.gen_bool(0.5);
            u8::from(d == 1 || post.no_cure() || coin)
        })
        .collect()
}

fn run_chain(post: &Posterior, cfg: &SamplerConfig, seed: u64, chain: usize) -> Result<ChainDraws> {
    let dim = post.dim();
    let kept = cfg.iterations - cfg.warmup;
    let mut rng = stream_rng(seed, streams::CHAIN_BASE + chain as u64);
    let opts = NutsOpts {
        max_tree_depth: cfg.max_tree_depth,
        divergence_threshold: DIVERGENCE_THRESHOLD,
    };

    let mut cure = init_cure(post, &mut rng);
    let base = init_base(post);
    let mut w = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut found = false;
    for _ in 0..100 {
        for (wj, bj) in w.iter_mut().zip(&base) {
            *wj = bj + cfg.init_jitter * (2.0 * rng.gen::<f64>() - 1.0);
        }
        let target = Conditioned { post, cure: &cure };
        if matches!(target.log_density_grad(&w, &mut grad), Ok(v) if v.is_finite()) {
            found = true;
            break;
        }
    }
    if !found {
        return Err(HjmError::InitFailure(
            "no finite starting point after 100 attempts; try a smaller init_jitter".into(),
        ));
    }

    let mut mass = DiagMass::unit(dim);
    let mut eps = {
        let target = Conditioned { post, cure: &cure };
        find_reasonable_epsilon(&target, &w, &mass, &mut rng)?
    };
    let mut da = DualAverage::new(eps, cfg.target_accept);
    let schedule = AdaptSchedule::new(cfg.warmup);
    let mut welford = RunningVariance::new(dim);

    let layout = post.layout();
    let n_cols = constrained_names(post).len();
    let mut unconstrained = Matrix::zeros(kept, dim);
    let mut constrained = Matrix::zeros(kept, n_cols);
    let mut cure_mat = Matrix::zeros(kept, post.n_subjects());
    let mut stats_v = Vec::with_capacity(kept);
    let mut divergences = 0usize;
    let mut warm_divergent = 0usize;
    let mut dbg_accept: Vec<f64> = Vec::new();
    let mut dbg_eps: Vec<f64> = Vec::new();

    for it in 0..cfg.iterations {
        let probs = post.cured_probs(&w);
        cure = gibbs_sweep(&probs, post.event_indicator(), &mut rng);
        let target = Conditioned { post, cure: &cure };
        let stats = match nuts_transition(&target, &mut w, eps, &mass, &opts, &mut rng) {
            Ok(s) => s,
            // An unusable state is handled like a divergent transition:
            // the chain stays put for this iteration.
            Err(_) => TransitionStats {
                accept_stat: 0.0,
                depth: 0,
                n_leapfrog: 0,
                divergent: true,
                energy: f64::NAN,
            },
        };
        dbg_accept.push(stats.accept_stat);
        dbg_eps.push(eps);
        if it < cfg.warmup {
            if stats.divergent {
                warm_divergent += 1;
            }
            eps = da.update(stats.accept_stat);
            if it >= schedule.slow_start && it < schedule.slow_end {
                welford.push(&w);
                if schedule.window_ends.contains(&(it + 1)) {
                    let refreshed = DiagMass::from_variances(&welford.regularized());
                    welford.reset();
                    let e = (da.adapted() * nuts::step_carry_over(&mass, &refreshed))
                        .clamp(1e-10, 1e10);
                    mass = refreshed;
                    da = if it + 1 == schedule.slow_end {
                        DualAverage::gentle(e, cfg.target_accept)
                    } else {
                        DualAverage::anchored(e, cfg.target_accept)
                    };
                    eps = da.adapted();
                }
            }
            if it + 1 == cfg.warmup {
                eps = da.adapted();
                if warm_divergent == cfg.warmup {
                    return Err(HjmError::InitFailure(
                        "every warmup transition diverged; try a smaller init_jitter or a \
                         higher target_accept"
                            .into(),
                    ));
                }
            }
        } else {
            let k = it - cfg.warmup;
            unconstrained.row_mut(k).copy_from_slice(&w);
            let (theta, _, _) = post.from_unconstrained(&w);
            let mut flat = theta.flatten(layout);
            flat.extend(theta.derived().into_iter().map(|(_, v)| v));
            constrained.row_mut(k).copy_from_slice(&flat);
            for (i, &c) in cure.iter().enumerate() {
                cure_mat.set(k, i, f64::from(c));
            }
            if stats.divergent {
                divergences += 1;
            }
            stats_v.push(IterStats {
                step_size: eps,
                depth: stats.depth,
                n_leapfrog: stats.n_leapfrog,
                accept_stat: stats.accept_stat,
                divergent: stats.divergent,
                energy: stats.energy,
            });
        }
    }

    if std::env::var("HJM_DEBUG_ADAPT").is_ok() {
        let seg = |a: usize, b: usize| -> f64 {
            dbg_accept[a..b].iter().sum::<f64>() / (b - a) as f64
        };
        let wu = cfg.warmup;
        eprintln!(
            "chain {chain}: eps frozen {:.4} | accept warm[{}..{}] {:.3} warm[{}..{}] {:.3} post {:.3}",
            eps,
            wu / 2,
            schedule.slow_end,
            seg(wu / 2, schedule.slow_end),
            schedule.slow_end,
            wu,
            seg(schedule.slow_end, wu),
            seg(wu, cfg.iterations),
        );
        let n = dbg_eps.len().min(wu + 1);
        let tail: Vec<String> = (schedule.slow_end.saturating_sub(3)..n.min(schedule.slow_end + 12))
            .map(|i| format!("{:.3}", dbg_eps[i]))
            .collect();
        eprintln!("chain {chain}: eps around final refresh: {}", tail.join(" "));
    }

    Ok(ChainDraws {
        unconstrained,
        constrained,
        cure: cure_mat,
        stats: stats_v,
        divergences,
        step_size: eps,
    })
}

/// Runs the full alternating sampler: `cfg.chains` independent chains, each
/// `cfg.iterations` long with the first `cfg.warmup` iterations used for
/// adaptation and discarded.
pub fn run_sampler(post: &Posterior, cfg: &SamplerConfig, seed: u64) -> Result<PosteriorDraws> {
    if cfg.chains == 0 {
        return Err(HjmError::Config("chains must be at least 1".into()));
    }
    if cfg.warmup >= cfg.iterations {
        return Err(HjmError::Config(format!(
            "warmup ({}) must be smaller than iterations ({})",
            cfg.warmup, cfg.iterations
        )));
    }
    let names = constrained_names(post);
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(post, cfg, seed, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws { names, chains })
}
