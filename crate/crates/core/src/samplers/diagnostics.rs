//! Rank-normalised split R-hat and effective sample size.
//!
//! Degenerate input (every split half constant) yields `NaN`, which callers
//! treat as "not computable" rather than as converged.

use serde::{Deserialize, Serialize};

use super::Chain;
use crate::error::{Error, Result};
use crate::stats::normal_quantile;

/// Potential scale reduction `max(bulk, tail)` for one dimension.
///
/// `chains[c]` holds the draws of chain `c`; longer chains are cut to the
/// shortest length.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let halves = split(chains)?;
    if degenerate(&halves) {
        return Ok(f64::NAN);
    }
    let bulk = rhat_basic(&rank_normalise(&halves));
    let folded = fold(&halves);
    let tail = if degenerate(&folded) {
        bulk
    } else {
        rhat_basic(&rank_normalise(&folded))
    };
    Ok(bulk.max(tail))
}

/// Bulk effective sample size for one dimension, capped at the total number
/// of draws.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<f64> {
    let halves = split(chains)?;
    if degenerate(&halves) {
        return Ok(f64::NAN);
    }
    let total = (halves.len() * halves[0].len()) as f64;
    Ok(ess_basic(&rank_normalise(&halves)).min(total))
}

/// Classic split R-hat without rank normalisation.
pub fn split_rhat_classic(chains: &[Vec<f64>]) -> Result<f64> {
    let halves = split(chains)?;
    if degenerate(&halves) {
        return Ok(f64::NAN);
    }
    Ok(rhat_basic(&halves))
}

fn split(chains: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if chains.is_empty() {
        return Err(Error::Data("diagnostics need at least one chain".into()));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 4 {
        return Err(Error::Data(format!("diagnostics need at least 4 draws per chain, got {n}")));
    }
    let half = n / 2;
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        out.push(c[..half].to_vec());
        // Odd lengths drop the middle draw.
        out.push(c[n - half..n].to_vec());
    }
    Ok(out)
}

fn degenerate(halves: &[Vec<f64>]) -> bool {
    halves.iter().all(|h| h.iter().all(|v| *v == h[0]))
        || halves.iter().flatten().any(|v| !v.is_finite())
}

fn fold(halves: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<f64> = halves.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let median = crate::stats::quantile_sorted(&pooled, 0.5);
    halves
        .iter()
        .map(|h| h.iter().map(|v| (v - median).abs()).collect())
        .collect()
}

/// Replaces every draw by `Φ⁻¹((r − 3/8)/(S + 1/4))`, `r` its pooled average rank.
fn rank_normalise(halves: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = halves[0].len();
    let mut idx: Vec<(f64, usize)> = halves
        .iter()
        .flatten()
        .copied()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = idx.len();
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && idx[j + 1].0 == idx[i].0 {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for item in &idx[i..=j] {
            ranks[item.1] = r;
        }
        i = j + 1;
    }
    let z: Vec<f64> = ranks
        .iter()
        .map(|r| normal_quantile((r - 0.375) / (s as f64 + 0.25)))
        .collect();
    z.chunks(m).map(<[f64]>::to_vec).collect()
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| crate::stats::mean(c)).collect();
    let vars: Vec<f64> = chains.iter().map(|c| crate::stats::variance(c)).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = vars.iter().sum::<f64>() / m;
    if w == 0.0 {
        return f64::NAN;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Biased autocovariance of one chain at lag `t`.
fn autocov(x: &[f64], mean: f64, t: usize) -> f64 {
    let n = x.len();
    x[..n - t]
        .iter()
        .zip(&x[t..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum::<f64>()
        / n as f64
}

/// Multi-chain ESS with Geyer's initial monotone sequence.
fn ess_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| crate::stats::mean(c)).collect();
    let acov = |t: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocov(c, mu, t))
            .sum::<f64>()
            / m as f64
    };
    let acov0 = acov(0);
    let mean_var = acov0 * n as f64 / (n as f64 - 1.0);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += crate::stats::variance(&means);
    }
    if var_plus <= 0.0 {
        return f64::NAN;
    }

    let mut rho = vec![0.0; n + 1];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - acov(1)) / var_plus;
    rho[1] = rho_odd;
    let mut t = 1;
    while t + 4 < n && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - acov(t + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - acov(t + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t + 1] = rho_even;
    }
    // Enforce monotone decrease of the paired sums.
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            let avg = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 1] = avg;
            rho[t + 2] = avg;
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let mut tau = -1.0 + 2.0 * rho[..=max_t].iter().sum::<f64>() + rho[max_t + 1];
    tau = tau.max(1.0 / total.log10());
    total / tau
}

/// Per-dimension diagnostics of a set of chains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub names: Vec<String>,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub divergences: Vec<usize>,
    pub acceptance_rate: Vec<f64>,
    pub block_acceptance: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl DiagnosticsReport {
    /// True when every computable R-hat is below `threshold`.
    pub fn converged(&self, threshold: f64) -> bool {
        !(self.max_rhat >= threshold)
    }
}

/// Computes R-hat and ESS for every column; `names` may be empty.
pub fn report(chains: &[Chain], names: &[String]) -> Result<DiagnosticsReport> {
    let cols = super::columns(chains);
    let mut rhat = Vec::with_capacity(cols.len());
    let mut ess = Vec::with_capacity(cols.len());
    for col in &cols {
        rhat.push(split_rhat(col)?);
        ess.push(effective_sample_size(col)?);
    }
    let max_rhat = rhat.iter().copied().filter(|v| v.is_finite()).fold(f64::NAN, f64::max);
    let min_ess = ess.iter().copied().filter(|v| v.is_finite()).fold(f64::NAN, f64::min);
    let names = if names.len() == cols.len() {
        names.to_vec()
    } else {
        (0..cols.len()).map(|k| format!("x{k}")).collect()
    };
    let warnings = chains
        .iter()
        .enumerate()
        .flat_map(|(k, c)| c.warnings.iter().map(move |w| format!("chain {k}: {w}")))
        .collect();
    Ok(DiagnosticsReport {
        names,
        rhat,
        ess,
        max_rhat,
        min_ess,
        divergences: chains.iter().map(|c| c.divergences).collect(),
        acceptance_rate: chains.iter().map(|c| c.acceptance_rate).collect(),
        block_acceptance: chains.iter().map(|c| c.block_acceptance.clone()).collect(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn normal_chain(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn ar1(seed: u64, n: usize, phi: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = 0.0;
        let sd = (1.0 - phi * phi).sqrt();
        (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = phi * x + sd * e;
                x
            })
            .collect()
    }

    #[test]
    fn converged_chains_have_rhat_near_one() {
        let chains = vec![normal_chain(1, 100_000), normal_chain(2, 100_000)];
        assert!(split_rhat(&chains).unwrap() < 1.01);
    }

    #[test]
    fn separated_chains_have_large_rhat() {
        let chains = vec![vec![1.0, 2.0, 3.0, 4.0], vec![101.0, 102.0, 103.0, 104.0]];
        assert!(split_rhat(&chains).unwrap() > 1.1);
        // Plain split R-hat on halves [1,2],[3,4],[101,102],[103,104]:
        // n = 2, W = 0.5, B = n · var(half means).
        let means: [f64; 4] = [1.5, 3.5, 101.5, 103.5];
        let grand = means.iter().sum::<f64>() / 4.0;
        let b = 2.0 / 3.0 * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
        let w = 0.5;
        let expected = ((0.5 * w + b / 2.0) / w).sqrt();
        let got = split_rhat_classic(&chains).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn constant_chain_is_sentinel() {
        assert!(split_rhat(&[vec![2.0; 10]]).unwrap().is_nan());
        assert!(effective_sample_size(&[vec![2.0; 10]]).unwrap().is_nan());
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0]]).is_err());
        assert!(split_rhat(&[]).is_err());
    }

    #[test]
    fn white_noise_ess_is_near_total() {
        let chains = vec![normal_chain(5, 5_000), normal_chain(6, 5_000)];
        let ess = effective_sample_size(&chains).unwrap();
        assert!(ess >= 8_000.0 && ess <= 10_000.0, "{ess}");
    }

    #[test]
    fn ar1_ess_matches_theory() {
        let n = 20_000;
        let chains = vec![ar1(7, n, 0.9), ar1(8, n, 0.9)];
        let ess = effective_sample_size(&chains).unwrap();
        let expected = 2.0 * n as f64 * 0.1 / 1.9;
        assert!(ess > expected / 1.5 && ess < expected * 1.5, "{ess} vs {expected}");
    }
}
