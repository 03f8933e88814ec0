//! No-U-turn Hamiltonian kernel over a generic differentiable log density.
//!
//! One transition simulates Hamiltonian dynamics with the leapfrog
//! integrator, repeatedly doubling the trajectory until it begins to fold
//! back on itself (checked in the Euclidean metric of a diagonal mass
//! matrix) or the depth bound is reached. The next state is drawn from the
//! trajectory with multinomial weights proportional to the Boltzmann factor
//! of each point; each doubling proposes its candidate with probability
//! `min(1, W_new/W_old)`, a bias toward the fresh half that favours
//! exploration. An energy error beyond [`DIVERGENCE_THRESHOLD`] stops the
//! doubling and marks the transition divergent; draws already selected from
//! the sound part of the trajectory remain valid.
//!
//! The kernel knows nothing about the joint model: anything implementing
//! [`Target`] can be sampled, which lets the tests drive it with
//! analytically known distributions. The supporting machinery for warmup —
//! initial step-size search ([`find_reasonable_epsilon`]), dual-averaging
//! adaptation ([`DualAverage`]), streaming variance estimation
//! ([`RunningVariance`]) and the staged timetable ([`AdaptSchedule`]) —
//! lives here as well.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::util::{dot, log_add_exp};
use crate::{HjmError, Result};

/// Energy error above which a leapfrog step is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// A differentiable log density in unconstrained coordinates.
pub trait Target {
    /// Dimension of the sample space.
    fn dim(&self) -> usize;

    /// Log density at `w` up to an additive constant; fills `grad` with its
    /// gradient.
    ///
    /// Negative infinity marks an impossible state — the kernel treats the
    /// step as divergent and ignores `grad`. An `Err` is handled the same
    /// way, so numerical failures inside a trajectory never abort a run.
    fn log_density_grad(&self, w: &[f64], grad: &mut [f64]) -> Result<f64>;
}

/// Diagonal mass matrix.
///
/// `inv` stores the inverse mass — the estimated marginal posterior
/// variances — so kinetic energy is `½ Σ inv[j]·p[j]²` and fresh momenta
/// have standard deviation `1/√inv[j]`.
#[derive(Debug, Clone)]
pub struct DiagMass {
    inv: Vec<f64>,
}

impl DiagMass {
    /// Identity metric.
    pub fn unit(dim: usize) -> DiagMass {
        DiagMass { inv: vec![1.0; dim] }
    }

    /// Metric built from estimated marginal variances; nonpositive or
    /// non-finite entries fall back to one.
    pub fn from_variances(var: &[f64]) -> DiagMass {
        DiagMass {
            inv: var
                .iter()
                .map(|&v| if v.is_finite() && v > 0.0 { v } else { 1.0 })
                .collect(),
        }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(&self.inv)
            .map(|(&pj, &ivj)| ivj * pj * pj)
            .sum::<f64>()
    }

    fn sample_momentum<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.inv
            .iter()
            .map(|&ivj| {
                let z: f64 = StandardNormal.sample(rng);
                z / ivj.sqrt()
            })
            .collect()
    }

    /// Velocity `M⁻¹p`, the direction the position actually moves.
    fn velocity(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv).map(|(&pj, &ivj)| ivj * pj).collect()
    }
}

/// Step-size carry-over factor when swapping metrics: the typical
/// per-coordinate position step stays unchanged when the old step size is
/// multiplied by this (geometric-mean) ratio. Carrying a well-adapted step
/// across a metric refresh this way leaves far less for the remaining
/// adaptation iterations to correct than a fresh coarse search would.
pub fn step_carry_over(old: &DiagMass, new: &DiagMass) -> f64 {
    if old.inv.is_empty() || old.inv.len() != new.inv.len() {
        return 1.0;
    }
    let s: f64 = old
        .inv
        .iter()
        .zip(&new.inv)
        .map(|(&a, &b)| (a / b).ln())
        .sum();
    (0.5 * s / old.inv.len() as f64).exp()
}

/// Tuning knobs of a single transition.
#[derive(Debug, Clone)]
pub struct NutsOpts {
    pub max_tree_depth: usize,
    pub divergence_threshold: f64,
}

impl Default for NutsOpts {
    fn default() -> Self {
        NutsOpts {
            max_tree_depth: 10,
            divergence_threshold: DIVERGENCE_THRESHOLD,
        }
    }
}

/// Outcome of one transition.
#[derive(Debug, Clone, Copy)]
pub struct TransitionStats {
    /// Mean acceptance statistic over every leapfrog step of the trajectory.
    pub accept_stat: f64,
    /// Number of trajectory doublings performed.
    pub depth: usize,
    /// Total leapfrog steps taken.
    pub n_leapfrog: usize,
    /// Whether any step exceeded the divergence threshold.
    pub divergent: bool,
    /// Hamiltonian at the selected draw.
    pub energy: f64,
}

#[derive(Clone)]
struct State {
    w: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

fn hamiltonian(s: &State, mass: &DiagMass) -> f64 {
    -s.logp + mass.kinetic(&s.p)
}

/// One leapfrog step of signed length `dir·eps`. `None` when the density is
/// unusable at the new position.
fn leapfrog<T: Target>(
    target: &T,
    s: &State,
    dir: f64,
    eps: f64,
    mass: &DiagMass,
) -> Option<State> {
    let e = dir * eps;
    let half: Vec<f64> = s
        .p
        .iter()
        .zip(&s.grad)
        .map(|(&pj, &gj)| pj + 0.5 * e * gj)
        .collect();
    let mut w = s.w.clone();
    for j in 0..w.len() {
        w[j] += e * mass.inv[j] * half[j];
    }
    let mut grad = vec![0.0; w.len()];
    let logp = match target.log_density_grad(&w, &mut grad) {
        Ok(v) if v.is_finite() => v,
        _ => return None,
    };
    let p: Vec<f64> = half
        .iter()
        .zip(&grad)
        .map(|(&pj, &gj)| pj + 0.5 * e * gj)
        .collect();
    Some(State { w, p, grad, logp })
}

/// U-turn test between the two ends of a trajectory segment: the segment is
/// turning when the displacement opposes the velocity at either end.
fn is_turning(lo: &State, hi: &State, mass: &DiagMass) -> bool {
    let dw: Vec<f64> = hi.w.iter().zip(&lo.w).map(|(a, b)| a - b).collect();
    dot(&dw, &mass.velocity(&lo.p)) < 0.0 || dot(&dw, &mass.velocity(&hi.p)) < 0.0
}

struct Subtree {
    /// Backward-most state in trajectory order.
    lo: State,
    /// Forward-most state in trajectory order.
    hi: State,
    /// Multinomial draw from the subtree.
    sample: State,
    /// Log of the summed Boltzmann weights of the subtree's leaves.
    log_weight: f64,
    divergent: bool,
    turning: bool,
    sum_accept: f64,
    n_leapfrog: usize,
}

#[allow(clippy::too_many_arguments)]
fn build_tree<T: Target, R: Rng>(
    target: &T,
    depth: usize,
    from: &State,
    dir: f64,
    eps: f64,
    h0: f64,
    mass: &DiagMass,
    opts: &NutsOpts,
    rng: &mut R,
) -> Subtree {
    if depth == 0 {
        return match leapfrog(target, from, dir, eps, mass) {
            Some(next) => {
                let delta = hamiltonian(&next, mass) - h0;
                // `!(delta < t)` also catches a NaN energy.
                let divergent = !(delta < opts.divergence_threshold);
                Subtree {
                    log_weight: if divergent { f64::NEG_INFINITY } else { -delta },
                    sum_accept: if divergent { 0.0 } else { (-delta).exp().min(1.0) },
                    lo: next.clone(),
                    hi: next.clone(),
                    sample: next,
                    divergent,
                    turning: false,
                    n_leapfrog: 1,
                }
            }
            None => Subtree {
                lo: from.clone(),
                hi: from.clone(),
                sample: from.clone(),
                log_weight: f64::NEG_INFINITY,
                divergent: true,
                turning: false,
                sum_accept: 0.0,
                n_leapfrog: 1,
            },
        };
    }
    let mut first = build_tree(target, depth - 1, from, dir, eps, h0, mass, opts, rng);
    if first.divergent || first.turning {
        return first;
    }
    let inner = if dir > 0.0 { &first.hi } else { &first.lo };
    let second = build_tree(target, depth - 1, inner, dir, eps, h0, mass, opts, rng);
    first.sum_accept += second.sum_accept;
    first.n_leapfrog += second.n_leapfrog;
    if second.divergent || second.turning {
        first.divergent = second.divergent;
        first.turning = second.turning;
        return first;
    }
    let total = log_add_exp(first.log_weight, second.log_weight);
    if rng.gen::<f64>() < (second.log_weight - total).exp() {
        first.sample = second.sample;
    }
    first.log_weight = total;
    if dir > 0.0 {
        first.hi = second.hi;
    } else {
        first.lo = second.lo;
    }
    first.turning = is_turning(&first.lo, &first.hi, mass);
    first
}

/// One No-U-turn transition from `w`, which is updated in place.
///
/// Errors only when the density is unusable at the *current* state; the
/// caller decides whether that aborts the run or counts as a divergence.
pub fn nuts_transition<T: Target, R: Rng>(
    target: &T,
    w: &mut [f64],
    eps: f64,
    mass: &DiagMass,
    opts: &NutsOpts,
    rng: &mut R,
) -> Result<TransitionStats> {
    let dim = w.len();
    let mut grad = vec![0.0; dim];
    let logp = target.log_density_grad(w, &mut grad)?;
    if !logp.is_finite() {
        return Err(HjmError::Numeric {
            coord: None,
            msg: "log density is not finite at the current state".into(),
        });
    }
    let init = State {
        w: w.to_vec(),
        p: mass.sample_momentum(rng),
        grad,
        logp,
    };
    let h0 = hamiltonian(&init, mass);
    let mut lo = init.clone();
    let mut hi = init.clone();
    let mut sample = init;
    let mut sample_energy = h0;
    let mut log_sum_w = 0.0;
    let mut depth = 0;
    let mut divergent = false;
    let mut sum_accept = 0.0;
    let mut n_leapfrog = 0usize;
    while depth < opts.max_tree_depth {
        let dir: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let from = if dir > 0.0 { &hi } else { &lo };
        let sub = build_tree(target, depth, from, dir, eps, h0, mass, opts, rng);
        sum_accept += sub.sum_accept;
        n_leapfrog += sub.n_leapfrog;
        if sub.divergent {
            divergent = true;
            break;
        }
        if sub.turning {
            break;
        }
        let take = rng.gen::<f64>() < (sub.log_weight - log_sum_w).exp();
        log_sum_w = log_add_exp(log_sum_w, sub.log_weight);
        let Subtree {
            lo: s_lo,
            hi: s_hi,
            sample: s_sample,
            ..
        } = sub;
        if take {
            sample = s_sample;
            sample_energy = hamiltonian(&sample, mass);
        }
        if dir > 0.0 {
            hi = s_hi;
        } else {
            lo = s_lo;
        }
        depth += 1;
        if is_turning(&lo, &hi, mass) {
            break;
        }
    }
    w.copy_from_slice(&sample.w);
    let accept_stat = if n_leapfrog > 0 {
        sum_accept / n_leapfrog as f64
    } else {
        0.0
    };
    Ok(TransitionStats {
        accept_stat,
        depth,
        n_leapfrog,
        divergent,
        energy: sample_energy,
    })
}

/// Initial step-size search: starting from one, the step is halved until a
/// single leapfrog stays numerically alive, then doubled or halved until
/// its acceptance ratio crosses one half.
pub fn find_reasonable_epsilon<T: Target, R: Rng>(
    target: &T,
    w: &[f64],
    mass: &DiagMass,
    rng: &mut R,
) -> Result<f64> {
    let dim = w.len();
    let mut grad = vec![0.0; dim];
    let logp = target.log_density_grad(w, &mut grad)?;
    if !logp.is_finite() {
        return Err(HjmError::InitFailure(
            "log density is not finite at the starting point".into(),
        ));
    }
    let state = State {
        w: w.to_vec(),
        p: mass.sample_momentum(rng),
        grad,
        logp,
    };
    let h0 = hamiltonian(&state, mass);
    let log_ratio = |eps: f64| -> f64 {
        match leapfrog(target, &state, 1.0, eps, mass) {
            Some(next) => h0 - hamiltonian(&next, mass),
            None => f64::NEG_INFINITY,
        }
    };
    let mut eps = 1.0;
    let mut r = log_ratio(eps);
    for _ in 0..60 {
        if r.is_finite() {
            break;
        }
        eps *= 0.5;
        r = log_ratio(eps);
    }
    if !r.is_finite() {
        return Err(HjmError::InitFailure(
            "no stable leapfrog step size at the starting point".into(),
        ));
    }
    let dir = if r > -std::f64::consts::LN_2 { 1.0 } else { -1.0 };
    for _ in 0..100 {
        if dir * r <= -dir * std::f64::consts::LN_2 || !(1e-10..=1e10).contains(&eps) {
            break;
        }
        eps *= if dir > 0.0 { 2.0 } else { 0.5 };
        let next = log_ratio(eps);
        if !next.is_finite() {
            // Overshot into instability; fall back to the last stable size.
            eps *= 0.5;
            break;
        }
        r = next;
    }
    Ok(eps.clamp(1e-10, 1e10))
}

/// Dual-averaging step-size controller driving the per-transition
/// acceptance statistic toward a target value.
#[derive(Debug, Clone)]
pub struct DualAverage {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    target: f64,
}

impl DualAverage {
    /// Fresh controller with the shrinkage point at `10·eps0`, biasing the
    /// early search toward larger (cheaper) steps. Suited to the start of
    /// warmup, where plenty of iterations remain to recover.
    pub fn new(eps0: f64, target_accept: f64) -> DualAverage {
        DualAverage {
            mu: (10.0 * eps0).ln(),
            ..DualAverage::anchored(eps0, target_accept)
        }
    }

    /// Controller with the shrinkage point at `eps0` itself. Suited to
    /// restarts late in warmup: an off-center shrinkage point would push
    /// the first iterates into a large oscillation that the few remaining
    /// iterations cannot average away.
    pub fn anchored(eps0: f64, target_accept: f64) -> DualAverage {
        DualAverage {
            mu: eps0.ln(),
            log_eps: eps0.ln(),
            log_eps_bar: eps0.ln(),
            h_bar: 0.0,
            m: 0.0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            target: target_accept,
        }
    }

    /// Low-gain controller for the last stretch of warmup, when `eps0` is
    /// already near its equilibrium. The reduced gain keeps the noise of
    /// the per-iteration acceptance statistic from whipping the step size
    /// around, which matters when few leapfrog steps average that noise.
    pub fn gentle(eps0: f64, target_accept: f64) -> DualAverage {
        DualAverage {
            gamma: 0.25,
            ..DualAverage::anchored(eps0, target_accept)
        }
    }

    /// Incorporates one acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        let a = if accept_stat.is_finite() {
            accept_stat.min(1.0)
        } else {
            0.0
        };
        self.m += 1.0;
        let eta = 1.0 / (self.m + self.t0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - a);
        self.log_eps = self.mu - self.m.sqrt() / self.gamma * self.h_bar;
        let wt = self.m.powf(-self.kappa);
        self.log_eps_bar = wt * self.log_eps + (1.0 - wt) * self.log_eps_bar;
        self.log_eps.exp()
    }

    /// Averaged step size to freeze once adaptation ends.
    pub fn adapted(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Streaming mean and variance of draws, used for metric estimation.
#[derive(Debug, Clone)]
pub struct RunningVariance {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVariance {
    pub fn new(dim: usize) -> RunningVariance {
        RunningVariance {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, w: &[f64]) {
        self.n += 1.0;
        for j in 0..w.len() {
            let d = w[j] - self.mean[j];
            self.mean[j] += d / self.n;
            self.m2[j] += d * (w[j] - self.mean[j]);
        }
    }

    pub fn count(&self) -> usize {
        self.n as usize
    }

    /// Variance estimate shrunk toward a small fixed scale, keeping short
    /// noisy windows from producing extreme metrics.
    pub fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|&s| {
                let var = if n > 1.0 { s / (n - 1.0) } else { 0.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }

    pub fn reset(&mut self) {
        self.n = 0.0;
        self.mean.iter_mut().for_each(|x| *x = 0.0);
        self.m2.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Staged warmup timetable: a fast start for step-size search alone,
/// doubling slow windows for metric estimation, and a fast tail that
/// settles the step size on the final metric.
#[derive(Debug, Clone)]
pub struct AdaptSchedule {
    /// First iteration of the slow (metric-estimation) region.
    pub slow_start: usize,
    /// One past the last iteration of the slow region.
    pub slow_end: usize,
    /// Completed-iteration counts at which the metric is refreshed.
    pub window_ends: Vec<usize>,
}

impl AdaptSchedule {
    pub fn new(warmup: usize) -> AdaptSchedule {
        // Too short to estimate a metric: adapt the step size only.
        if warmup < 20 {
            return AdaptSchedule {
                slow_start: 0,
                slow_end: 0,
                window_ends: vec![],
            };
        }
        let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
        if init + term + base > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.10 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        let slow_start = init;
        let slow_end = warmup - term;
        let mut window_ends = Vec::new();
        let mut start = init;
        let mut width = base;
        loop {
            let mut end = start + width;
            // The final window absorbs any remainder too short to double.
            if end + 2 * width > slow_end {
                end = slow_end;
            }
            window_ends.push(end);
            if end >= slow_end {
                break;
            }
            start = end;
            width *= 2;
        }
        AdaptSchedule {
            slow_start,
            slow_end,
            window_ends,
        }
    }
}
