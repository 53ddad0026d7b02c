//! MCMC machinery: adaptive random-walk Metropolis-within-Gibbs, NUTS with
//! dual-averaging step size and windowed diagonal metric adaptation, and
//! rank-normalised convergence diagnostics.
//!
//! Chains run in parallel, each with its own ChaCha stream seeded from a
//! master seed via [`derive_seed`], so results do not depend on scheduling.

pub mod diagnostics;
pub mod nuts;
pub mod rwm;

use serde::{Deserialize, Serialize};

pub use diagnostics::{effective_sample_size, split_rhat};
pub use nuts::{nuts, NutsConfig};
pub use rwm::{rwm_gibbs, GibbsBlock, GibbsBlockSpec, RwmConfig};

/// A log density on `ℝ^d`, up to an additive constant.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// `-∞` marks states outside the support.
    fn log_density(&self, x: &[f64]) -> f64;
}

/// A log density with its gradient.
pub trait LogDensityGrad: LogDensity {
    /// Writes `∇ log p(x)` into `grad` and returns `log p(x)`.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Adapter turning closures into targets.
pub struct FnTarget<F, G = fn(&[f64], &mut [f64]) -> f64> {
    dim: usize,
    f: F,
    g: Option<G>,
}

impl<F> FnTarget<F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnTarget { dim, f, g: None }
    }
}

impl<F, G> FnTarget<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    pub fn with_gradient(dim: usize, f: F, g: G) -> Self {
        FnTarget {
            dim,
            f,
            g: Some(g),
        }
    }
}

impl<F, G> LogDensity for FnTarget<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

impl<F, G> LogDensityGrad for FnTarget<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match &self.g {
            Some(g) => g(x, grad),
            None => {
                let f = self.log_density(x);
                finite_difference_gradient(self, x, grad);
                f
            }
        }
    }
}

/// Central finite-difference gradient with step `1e-6 · max(1, |x_i|)`.
pub fn finite_difference_gradient<T: LogDensity + ?Sized>(target: &T, x: &[f64], grad: &mut [f64]) {
    let mut y = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        y[i] = x[i] + h;
        let up = target.log_density(&y);
        y[i] = x[i] - h;
        let dn = target.log_density(&y);
        y[i] = x[i];
        grad[i] = (up - dn) / (2.0 * h);
    }
}

/// Largest relative discrepancy between the analytic gradient and central
/// differences at `x`, using `max(1, |g|)` as the scale.
pub fn gradient_discrepancy<T: LogDensityGrad + ?Sized>(target: &T, x: &[f64]) -> f64 {
    let d = x.len();
    let mut analytic = vec![0.0; d];
    let mut numeric = vec![0.0; d];
    target.log_density_grad(x, &mut analytic);
    finite_difference_gradient(target, x, &mut numeric);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Snapshot of the kernel parameters at one point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSnapshot {
    pub iteration: usize,
    /// Per-block proposal scales (RWM) or the single step size (NUTS).
    pub step_sizes: Vec<f64>,
    /// Diagonal of the proposal covariance (RWM) or inverse metric (NUTS).
    pub diagonal: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    /// First iteration produced by the frozen kernel.
    pub frozen_at: usize,
    pub snapshots: Vec<AdaptationSnapshot>,
}

impl AdaptationRecord {
    /// True when every snapshot taken at or after `frozen_at` is identical.
    pub fn is_frozen_after_warmup(&self) -> bool {
        let mut after = self
            .snapshots
            .iter()
            .filter(|s| s.iteration >= self.frozen_at);
        match after.next() {
            Some(first) => after.all(|s| s.step_sizes == first.step_sizes && s.diagonal == first.diagonal),
            None => false,
        }
    }
}

/// One chain's retained draws and run statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chain {
    /// Retained draws, one row per iteration.
    pub draws: Vec<Vec<f64>>,
    /// Post-warmup acceptance rate (mean over blocks for RWM, mean
    /// acceptance statistic for NUTS).
    pub acceptance_rate: f64,
    /// Post-warmup acceptance per Gibbs block; one entry for NUTS.
    pub block_acceptance: Vec<f64>,
    /// Divergent post-warmup transitions.
    pub divergences: usize,
    /// Divergence flag per retained draw (empty for RWM).
    pub divergent: Vec<bool>,
    /// Tree depth per retained draw (empty for RWM).
    pub tree_depth: Vec<usize>,
    pub warmup_divergences: usize,
    pub seed: u64,
    pub adaptation: AdaptationRecord,
    pub warnings: Vec<String>,
}

impl Chain {
    /// A chain rebuilt from persisted draws; run statistics are unknown.
    pub fn from_draws(draws: Vec<Vec<f64>>) -> Self {
        Chain {
            draws,
            acceptance_rate: f64::NAN,
            block_acceptance: Vec::new(),
            divergences: 0,
            divergent: Vec::new(),
            tree_depth: Vec::new(),
            warmup_divergences: 0,
            seed: 0,
            adaptation: AdaptationRecord::default(),
            warnings: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    /// Column `k` of the draws.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.draws.iter().map(|row| row[k]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for row in &self.draws {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let n = self.draws.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// Per-dimension draws of several chains: `out[k][c]` is chain `c`, dimension `k`.
pub fn columns(chains: &[Chain]) -> Vec<Vec<Vec<f64>>> {
    let d = chains.first().map_or(0, Chain::dim);
    (0..d)
        .map(|k| chains.iter().map(|c| c.column(k)).collect())
        .collect()
}

/// SplitMix64 mixing of a master seed with a stream index.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
