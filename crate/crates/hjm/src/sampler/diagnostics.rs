//! Convergence and efficiency summaries of posterior draws.
//!
//! Two statistics are reported per scalar parameter. The potential scale
//! reduction factor compares between- and within-chain variance after each
//! chain is split in half, so a trending chain inflates the factor even
//! when complete chains happen to overlap. The effective sample size
//! rank-normalizes the pooled draws (ranks mapped through the normal
//! quantile function), estimates combined-chain autocorrelations, and sums
//! Geyer's initial monotone sequence of autocorrelation pairs; rank
//! normalization makes the estimate robust to heavy tails.

use serde::Serialize;

use crate::util::{mean, normal_quantile, quantile_sorted, variance};

use super::PosteriorDraws;

/// Posterior summary of one scalar parameter.
#[derive(Debug, Clone, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q50: f64,
    pub q97_5: f64,
    /// Split-chain potential scale reduction; absent with a single chain or
    /// degenerate draws.
    pub rhat: Option<f64>,
    /// Rank-normalized effective sample size; absent for degenerate draws.
    pub ess: Option<f64>,
}

/// Splits every chain in half, dropping the middle draw of odd-length
/// chains; all chains are first truncated to the shortest length.
fn split_halves(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        out.push(c[..half].to_vec());
        out.push(c[n - half..n].to_vec());
    }
    out
}

/// Split-chain potential scale reduction factor.
///
/// `None` when fewer than two draws per half-chain remain or the
/// within-chain variance vanishes (constant chains).
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let halves = split_halves(chains);
    let m = halves.len();
    let n = halves.first()?.len();
    if m < 2 || n < 2 {
        return None;
    }
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let vars: Vec<f64> = halves.iter().map(|c| variance(c)).collect();
    let w = mean(&vars);
    if !w.is_finite() || w <= 0.0 {
        return None;
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + variance(&means);
    let r = (var_plus / w).sqrt();
    r.is_finite().then_some(r)
}

/// Rank-normalized split-chain effective sample size.
pub fn ess_rank_normalized(chains: &[Vec<f64>]) -> Option<f64> {
    let halves = split_halves(chains);
    let z = rank_normalize(&halves)?;
    ess_of(&z)
}

/// Maps pooled draws to normal quantiles of their fractional ranks
/// (average ranks on ties), preserving the chain structure.
fn rank_normalize(chains: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    if total == 0 {
        return None;
    }
    let flat: Vec<f64> = chains.concat();
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]));
    let mut rank = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && flat[order[j + 1]] == flat[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            rank[k] = avg;
        }
        i = j + 1;
    }
    let mut z = Vec::with_capacity(chains.len());
    let mut offset = 0;
    for c in chains {
        z.push(
            rank[offset..offset + c.len()]
                .iter()
                .map(|&r| normal_quantile((r - 0.375) / (total as f64 + 0.25)))
                .collect(),
        );
        offset += c.len();
    }
    Some(z)
}

/// Multi-chain effective sample size from Geyer's initial monotone
/// sequence of autocorrelation pairs.
fn ess_of(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    let n = chains.first()?.len();
    if n < 4 {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    // Autocovariance with divisor n, per chain.
    let acov = |t: usize| -> f64 {
        let mut s = 0.0;
        for (c, &mu) in chains.iter().zip(&means) {
            let mut sc = 0.0;
            for i in 0..n - t {
                sc += (c[i] - mu) * (c[i + t] - mu);
            }
            s += sc / n as f64;
        }
        s / m as f64
    };
    let a0 = acov(0);
    let w = a0 * n as f64 / (n as f64 - 1.0);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + variance(&means);
    if !var_plus.is_finite() || var_plus <= 0.0 {
        return None;
    }
    let rho = |t: usize| 1.0 - (w - acov(t)) / var_plus;
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if !(pair > 0.0) {
            break;
        }
        let capped = pair.min(prev);
        tau += 2.0 * capped;
        prev = capped;
        t += 2;
    }
    if !(tau > 0.0) {
        return None;
    }
    Some((m * n) as f64 / tau)
}

/// Per-parameter posterior summaries over all chains of a run.
pub fn summarize(draws: &PosteriorDraws) -> Vec<ParamSummary> {
    (0..draws.names.len())
        .map(|j| {
            let chains: Vec<Vec<f64>> = draws
                .chains
                .iter()
                .map(|c| c.constrained.col(j))
                .collect();
            let pooled: Vec<f64> = chains.concat();
            let mut sorted = pooled.clone();
            sorted.sort_by(f64::total_cmp);
            ParamSummary {
                name: draws.names[j].clone(),
                mean: mean(&pooled),
                sd: variance(&pooled).sqrt(),
                q2_5: quantile_sorted(&sorted, 0.025),
                q50: quantile_sorted(&sorted, 0.5),
                q97_5: quantile_sorted(&sorted, 0.975),
                rhat: if draws.chains.len() >= 2 {
                    split_rhat(&chains)
                } else {
                    None
                },
                ess: ess_rank_normalized(&chains),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_chains(m: usize, n: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        (0..m)
            .map(|c| {
                let mut rng = stream_rng(seed, c as u64);
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z + shift * c as f64
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn constant_chains_are_flagged_not_scored() {
        let chains = vec![vec![2.5; 100], vec![2.5; 100]];
        assert_eq!(split_rhat(&chains), None);
        assert_eq!(ess_rank_normalized(&chains), None);
    }

    #[test]
    fn independent_draws_score_near_the_full_sample_size() {
        let chains = normal_chains(4, 2000, 0.0, 11);
        let ess = ess_rank_normalized(&chains).expect("ess");
        let s = 8000.0;
        assert!((ess - s).abs() < 0.15 * s, "ess {ess}");
        let rhat = split_rhat(&chains).expect("rhat");
        assert!((rhat - 1.0).abs() < 0.01, "rhat {rhat}");
    }

    #[test]
    fn autocorrelated_draws_match_the_analytic_rate() {
        // First-order autoregression with coefficient 0.9: the asymptotic
        // efficiency is (1-0.9)/(1+0.9) of the raw draw count.
        let rho: f64 = 0.9;
        let m = 4;
        let n = 5000;
        let chains: Vec<Vec<f64>> = (0..m)
            .map(|c| {
                let mut rng = stream_rng(13, c as u64);
                let mut x = 0.0;
                let innov = (1.0 - rho * rho).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x = rho * x + innov * z;
                        x
                    })
                    .collect()
            })
            .collect();
        let ess = ess_rank_normalized(&chains).expect("ess");
        let expect = (m * n) as f64 * (1.0 - rho) / (1.0 + rho);
        assert!(
            (ess - expect).abs() < 0.25 * expect,
            "ess {ess} vs expected {expect}"
        );
    }

    #[test]
    fn mean_shifted_chains_inflate_the_scale_reduction() {
        let chains = normal_chains(2, 500, 3.0, 17);
        let rhat = split_rhat(&chains).expect("rhat");
        assert!(rhat > 1.2, "rhat {rhat}");
    }

    #[test]
    fn trending_chain_is_caught_by_the_split() {
        // A single chain drifting linearly: whole-chain comparison cannot
        // see it, but the two halves disagree.
        let n = 1000;
        let mut rng = stream_rng(19, 0);
        let chain: Vec<f64> = (0..n)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z + 3.0 * i as f64 / n as f64
            })
            .collect();
        let rhat = split_rhat(&[chain]).expect("rhat");
        assert!(rhat > 1.2, "rhat {rhat}");
    }
}
