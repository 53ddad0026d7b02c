//! Adaptive random-walk Metropolis-within-Gibbs.
//!
//! Each block proposes `x_B' = x_B + s_B L_B z` with `z ~ N(0, I)`. During
//! burn-in, `log s_B` follows a Robbins–Monro recursion towards the target
//! acceptance; blocks flagged for covariance adaptation replace `L_B` with
//! the Cholesky factor of a shrunk empirical covariance at the end of each
//! of a sequence of doubling windows. After burn-in the kernel is fixed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, AdaptationRecord, AdaptationSnapshot, Chain, LogDensity};
use crate::error::{Error, Result};

/// Acceptance band inside which a block is considered well tuned.
pub const ACCEPTANCE_BAND: (f64, f64) = (0.184, 0.284);

/// One Gibbs block.
#[derive(Debug, Clone)]
pub struct GibbsBlock {
    pub indices: Vec<usize>,
    /// Initial proposal scale `s_B`.
    pub scale: f64,
    /// Lower Cholesky factor of the proposal shape; identity when `None`.
    pub shape: Option<DMatrix<f64>>,
    /// Learn the shape from the empirical covariance during burn-in.
    pub adapt_covariance: bool,
}

impl GibbsBlock {
    pub fn new(indices: Vec<usize>, scale: f64) -> Self {
        GibbsBlock {
            indices,
            scale,
            shape: None,
            adapt_covariance: false,
        }
    }

    pub fn with_shape(mut self, chol: DMatrix<f64>) -> Self {
        self.shape = Some(chol);
        self
    }

    pub fn adaptive(mut self) -> Self {
        self.adapt_covariance = true;
        self
    }
}

/// Partition of the state into Gibbs blocks.
#[derive(Debug, Clone)]
pub struct GibbsBlockSpec {
    pub blocks: Vec<GibbsBlock>,
    /// Iterations between scale updates during burn-in.
    pub adapt_interval: usize,
}

impl GibbsBlockSpec {
    pub fn new(blocks: Vec<GibbsBlock>) -> Self {
        GibbsBlockSpec {
            blocks,
            adapt_interval: 50,
        }
    }

    /// Checks that the blocks partition `0..dim` and every proposal is usable.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("no Gibbs blocks".into()));
        }
        if self.adapt_interval == 0 {
            return Err(Error::Config("adapt_interval must be positive".into()));
        }
        let mut seen = vec![false; dim];
        for (k, b) in self.blocks.iter().enumerate() {
            if b.indices.is_empty() {
                return Err(Error::Config(format!("block {k} is empty")));
            }
            if !(b.scale.is_finite() && b.scale > 0.0) {
                return Err(Error::Config(format!(
                    "block {k}: proposal scale must be positive and finite, got {}",
                    b.scale
                )));
            }
            for &i in &b.indices {
                if i >= dim {
                    return Err(Error::Config(format!("block {k}: index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Config(format!("coordinate {i} appears in two blocks")));
                }
                seen[i] = true;
            }
            if let Some(l) = &b.shape {
                let n = b.indices.len();
                if l.nrows() != n || l.ncols() != n {
                    return Err(Error::Config(format!(
                        "block {k}: shape is {}x{}, expected {n}x{n}",
                        l.nrows(),
                        l.ncols()
                    )));
                }
                if l.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!("block {k}: non-finite shape")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("coordinate {i} is in no block")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RwmConfig {
    pub chains: usize,
    pub burn_in: usize,
    /// Post-burn-in iterations.
    pub iterations: usize,
    /// Keep every `thin`-th post-burn-in state.
    pub thin: usize,
    pub seed: u64,
    pub target_accept: f64,
}

impl Default for RwmConfig {
    fn default() -> Self {
        RwmConfig {
            chains: 3,
            burn_in: 10_000,
            iterations: 50_000,
            thin: 1,
            seed: 0,
            target_accept: 0.234,
        }
    }
}

/// Runs `config.chains` chains in parallel, chain `k` from `inits[k]`.
pub fn rwm_gibbs<T: LogDensity + ?Sized>(
    target: &T,
    spec: &GibbsBlockSpec,
    config: &RwmConfig,
    inits: &[Vec<f64>],
) -> Result<Vec<Chain>> {
    let dim = target.dim();
    spec.validate(dim)?;
    if config.chains == 0 || config.iterations == 0 || config.thin == 0 {
        return Err(Error::Config("chains, iterations and thin must be positive".into()));
    }
    if !(config.target_accept > 0.0 && config.target_accept < 1.0) {
        return Err(Error::Config("target acceptance must lie in (0, 1)".into()));
    }
    if inits.len() != config.chains {
        return Err(Error::Config(format!(
            "{} initial states for {} chains",
            inits.len(),
            config.chains
        )));
    }
    for (k, x) in inits.iter().enumerate() {
        if x.len() != dim {
            return Err(Error::Config(format!("initial state {k} has length {}, expected {dim}", x.len())));
        }
        let lp = target.log_density(x);
        if !lp.is_finite() {
            return Err(Error::Sampler(format!(
                "chain {k}: log density at the initial state is {lp}"
            )));
        }
    }
    (0..config.chains)
        .into_par_iter()
        .map(|k| run_chain(target, spec, config, &inits[k], derive_seed(config.seed, k as u64)))
        .collect()
}

struct BlockState {
    indices: Vec<usize>,
    log_scale: f64,
    chol: DMatrix<f64>,
    adapt_covariance: bool,
    /// Robbins–Monro step counter.
    updates: usize,
    window_accepts: usize,
    accepts: usize,
    proposals: usize,
    welford: Welford,
}

impl BlockState {
    fn proposal_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        let s2 = (2.0 * self.log_scale).exp();
        (0..self.chol.nrows()).map(move |i| s2 * self.chol.row(i).norm_squared())
    }
}

/// Running mean and scatter matrix.
struct Welford {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Welford {
            n: 0,
            mean: DVector::zeros(d),
            m2: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> Option<DMatrix<f64>> {
        (self.n >= 2).then(|| &self.m2 / (self.n - 1) as f64)
    }

    fn reset(&mut self) {
        let d = self.mean.len();
        *self = Welford::new(d);
    }
}

/// Iterations at which covariance windows close, as burn-in fractions.
const WINDOW_ENDS: [f64; 4] = [0.15, 0.25, 0.45, 0.85];
const WINDOW_START: f64 = 0.10;
/// Below this burn-in length shapes are never learned.
const MIN_COVARIANCE_BURN_IN: usize = 200;

fn shrunk_cholesky(cov: &DMatrix<f64>, n: usize) -> Option<DMatrix<f64>> {
    let d = cov.nrows();
    let trace = cov.trace();
    if !(trace.is_finite() && trace > 0.0) {
        return None;
    }
    let prior_weight = 10.0 * d as f64;
    let w = prior_weight / (prior_weight + n as f64);
    let mut target = cov * (1.0 - w);
    let ridge = w * trace / d as f64 + 1e-12 * trace;
    for i in 0..d {
        target[(i, i)] += ridge;
    }
    target.cholesky().map(|c| c.l())
}

fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    spec: &GibbsBlockSpec,
    config: &RwmConfig,
    init: &[f64],
    seed: u64,
) -> Result<Chain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<BlockState> = spec
        .blocks
        .iter()
        .map(|b| {
            let n = b.indices.len();
            BlockState {
                indices: b.indices.clone(),
                log_scale: b.scale.ln(),
                chol: b.shape.clone().unwrap_or_else(|| DMatrix::identity(n, n)),
                adapt_covariance: b.adapt_covariance,
                updates: 0,
                window_accepts: 0,
                accepts: 0,
                proposals: 0,
                welford: Welford::new(n),
            }
        })
        .collect();

    let burn_in = config.burn_in;
    let learn_shapes = burn_in >= MIN_COVARIANCE_BURN_IN;
    let window_start = (WINDOW_START * burn_in as f64) as usize;
    let window_ends: Vec<usize> = WINDOW_ENDS
        .iter()
        .map(|f| (f * burn_in as f64) as usize)
        .collect();
    let n_scale_updates = burn_in / spec.adapt_interval;
    let snapshot_every = (n_scale_updates / 100).max(1);

    let mut x = init.to_vec();
    let mut lp = target.log_density(&x);
    let mut proposal = x.clone();
    let mut record = AdaptationRecord {
        frozen_at: burn_in,
        snapshots: Vec::new(),
    };
    let snapshot = |blocks: &[BlockState], iteration: usize| AdaptationSnapshot {
        iteration,
        step_sizes: blocks.iter().map(|b| b.log_scale.exp()).collect(),
        diagonal: blocks.iter().flat_map(|b| b.proposal_diagonal()).collect(),
    };
    record.snapshots.push(snapshot(&blocks, 0));

    let total = burn_in + config.iterations;
    let mut draws = Vec::with_capacity(config.iterations / config.thin + 1);
    let mut z = DVector::zeros(0);
    for iter in 0..total {
        if iter == burn_in {
            for b in &mut blocks {
                b.accepts = 0;
                b.proposals = 0;
            }
            record.snapshots.push(snapshot(&blocks, burn_in));
        }
        for b in &mut blocks {
            let n = b.indices.len();
            if z.len() != n {
                z = DVector::zeros(n);
            }
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let step = &b.chol * &z * b.log_scale.exp();
            proposal.copy_from_slice(&x);
            for (k, &i) in b.indices.iter().enumerate() {
                proposal[i] += step[k];
            }
            let lp_new = target.log_density(&proposal);
            b.proposals += 1;
            let log_u: f64 = rng.random::<f64>().ln();
            if lp_new.is_finite() && log_u < lp_new - lp {
                x.copy_from_slice(&proposal);
                lp = lp_new;
                b.accepts += 1;
                b.window_accepts += 1;
            }
        }

        if iter >= burn_in {
            if (iter - burn_in) % config.thin == 0 {
                draws.push(x.clone());
            }
            continue;
        }

        // Burn-in adaptation.
        if learn_shapes && iter >= window_start && iter < *window_ends.last().unwrap() {
            for b in blocks.iter_mut().filter(|b| b.adapt_covariance) {
                let v = DVector::from_iterator(b.indices.len(), b.indices.iter().map(|&i| x[i]));
                b.welford.push(&v);
            }
        }
        if learn_shapes && window_ends.contains(&(iter + 1)) {
            for b in blocks.iter_mut().filter(|b| b.adapt_covariance) {
                if let Some(cov) = b.welford.covariance() {
                    if let Some(l) = shrunk_cholesky(&cov, b.welford.n) {
                        let d = b.indices.len() as f64;
                        b.chol = l;
                        b.log_scale = (2.38 / d.sqrt()).ln();
                        b.updates = 0;
                    }
                }
                b.welford.reset();
            }
        }
        if (iter + 1) % spec.adapt_interval == 0 {
            let mut updated = 0;
            for b in &mut blocks {
                let rate = b.window_accepts as f64 / spec.adapt_interval as f64;
                let gain = (2.0 / ((b.updates + 1) as f64).sqrt()).max(0.2);
                b.log_scale += gain * (rate - config.target_accept);
                b.updates += 1;
                b.window_accepts = 0;
                updated = b.updates;
            }
            if updated % snapshot_every == 0 {
                record.snapshots.push(snapshot(&blocks, iter + 1));
            }
        }
    }
    if burn_in == 0 {
        record.snapshots.push(snapshot(&blocks, 0));
    }
    record.snapshots.push(snapshot(&blocks, total));

    let block_acceptance: Vec<f64> = blocks
        .iter()
        .map(|b| b.accepts as f64 / b.proposals.max(1) as f64)
        .collect();
    let warnings = block_acceptance
        .iter()
        .enumerate()
        .filter(|(_, &r)| r < ACCEPTANCE_BAND.0 || r > ACCEPTANCE_BAND.1)
        .map(|(k, r)| format!("block {k}: post-adaptation acceptance {r:.3} outside [0.184, 0.284]"))
        .collect();
    let acceptance_rate = block_acceptance.iter().sum::<f64>() / block_acceptance.len() as f64;
    Ok(Chain {
        draws,
        acceptance_rate,
        block_acceptance,
        divergences: 0,
        divergent: Vec::new(),
        tree_depth: Vec::new(),
        warmup_divergences: 0,
        seed,
        adaptation: record,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::FnTarget;

    fn std_normal(d: usize) -> impl LogDensity {
        FnTarget::new(d, |x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>())
    }

    #[test]
    fn validates_partition() {
        let spec = GibbsBlockSpec::new(vec![GibbsBlock::new(vec![0, 1], 1.0), GibbsBlock::new(vec![1, 2], 1.0)]);
        assert!(spec.validate(3).is_err());
        let spec = GibbsBlockSpec::new(vec![GibbsBlock::new(vec![0], 1.0)]);
        assert!(spec.validate(2).is_err());
        let spec = GibbsBlockSpec::new(vec![GibbsBlock::new(vec![0, 1], 1.0)]);
        assert!(spec.validate(2).is_ok());
    }

    #[test]
    fn zero_scale_is_rejected() {
        let t = std_normal(1);
        let spec = GibbsBlockSpec::new(vec![GibbsBlock::new(vec![0], 0.0)]);
        let cfg = RwmConfig {
            chains: 1,
            ..Default::default()
        };
        assert!(matches!(rwm_gibbs(&t, &spec, &cfg, &[vec![0.0]]), Err(Error::Config(_))));
    }

    #[test]
    fn infinite_initial_density_is_rejected() {
        let t = FnTarget::new(1, |x: &[f64]| if x[0] > 0.0 { 0.0 } else { f64::NEG_INFINITY });
        let spec = GibbsBlockSpec::new(vec![GibbsBlock::new(vec![0], 1.0)]);
        let cfg = RwmConfig {
            chains: 1,
            ..Default::default()
        };
        assert!(matches!(rwm_gibbs(&t, &spec, &cfg, &[vec![-1.0]]), Err(Error::Sampler(_))));
    }

    #[test]
    fn one_dimensional_normal_moments() {
        let t = std_normal(1);
        let spec = GibbsBlockSpec::new(vec![GibbsBlock::new(vec![0], 0.5)]);
        let cfg = RwmConfig {
            chains: 1,
            burn_in: 5_000,
            iterations: 100_000,
            seed: 11,
            ..Default::default()
        };
        let chains = rwm_gibbs(&t, &spec, &cfg, &[vec![0.3]]).unwrap();
        let xs = chains[0].column(0);
        let m = crate::stats::mean(&xs);
        let v = crate::stats::variance(&xs);
        assert!(m.abs() <= 0.02 * 2.0, "mean {m}");
        assert!((v - 1.0).abs() <= 0.05, "variance {v}");
    }

    #[test]
    fn adaptation_is_frozen_after_burn_in() {
        let t = std_normal(3);
        let spec = GibbsBlockSpec::new(vec![GibbsBlock::new(vec![0, 1, 2], 0.1).adaptive()]);
        let cfg = RwmConfig {
            chains: 2,
            burn_in: 2_000,
            iterations: 1_000,
            seed: 3,
            ..Default::default()
        };
        let inits = vec![vec![0.0; 3]; 2];
        for c in rwm_gibbs(&t, &spec, &cfg, &inits).unwrap() {
            assert!(c.adaptation.is_frozen_after_warmup());
            assert_eq!(c.draws.len(), 1_000);
        }
    }

    #[test]
    fn thinning_keeps_every_kth_state() {
        let t = std_normal(2);
        let spec = GibbsBlockSpec::new(vec![GibbsBlock::new(vec![0], 1.0), GibbsBlock::new(vec![1], 1.0)]);
        let cfg = RwmConfig {
            chains: 1,
            burn_in: 100,
            iterations: 1_000,
            thin: 10,
            seed: 5,
            ..Default::default()
        };
        let c = rwm_gibbs(&t, &spec, &cfg, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(c[0].draws.len(), 100);
    }

    #[test]
    fn two_state_histogram_is_preserved() {
        // Density on ℝ favouring two wells with mass ratio 3:1, discretised by sign.
        let t = FnTarget::new(1, |x: &[f64]| {
            let w = if x[0] > 0.0 { 3.0_f64 } else { 1.0 };
            w.ln() - 0.5 * (x[0].abs() - 1.0).powi(2) / 0.25 + if x[0].abs() > 5.0 { f64::NEG_INFINITY } else { 0.0 }
        });
        let spec = GibbsBlockSpec::new(vec![GibbsBlock::new(vec![0], 1.0)]);
        let cfg = RwmConfig {
            chains: 1,
            burn_in: 5_000,
            iterations: 200_000,
            seed: 17,
            ..Default::default()
        };
        let c = rwm_gibbs(&t, &spec, &cfg, &[vec![1.0]]).unwrap();
        let pos = c[0].draws.iter().filter(|d| d[0] > 0.0).count() as f64 / c[0].draws.len() as f64;
        assert!((pos - 0.75).abs() < 0.02, "positive fraction {pos}");
    }
}
