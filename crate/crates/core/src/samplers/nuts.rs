//! No-U-Turn sampler with multinomial trajectory sampling, a diagonal metric
//! learned in doubling warmup windows, and dual-averaging step size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, AdaptationRecord, AdaptationSnapshot, Chain, LogDensityGrad};
use crate::error::{Error, Result};

/// Energy error beyond which a transition is divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NutsConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub thin: usize,
    pub seed: u64,
    pub step_size_init: f64,
    pub adapt_delta: f64,
    pub max_tree_depth: usize,
    pub init_buffer: usize,
    pub term_buffer: usize,
    pub base_window: usize,
    /// Dual-averaging constants.
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
}

impl Default for NutsConfig {
    fn default() -> Self {
        NutsConfig {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            thin: 1,
            seed: 0,
            step_size_init: 0.01,
            adapt_delta: 0.99,
            max_tree_depth: 14,
            init_buffer: 75,
            term_buffer: 50,
            base_window: 25,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }
}

impl NutsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.draws == 0 || self.thin == 0 {
            return Err(Error::Config("chains, draws and thin must be positive".into()));
        }
        if !(self.step_size_init.is_finite() && self.step_size_init > 0.0) {
            return Err(Error::Config("initial step size must be positive".into()));
        }
        if !(self.adapt_delta > 0.0 && self.adapt_delta < 1.0) {
            return Err(Error::Config("adapt_delta must lie in (0, 1)".into()));
        }
        if self.max_tree_depth == 0 {
            return Err(Error::Config("max_tree_depth must be positive".into()));
        }
        Ok(())
    }
}

/// One leapfrog step of size `eps` under the diagonal inverse metric.
/// `grad` holds `∇ log p(q)` on entry and is updated; returns `log p` at
/// the new position.
pub fn leapfrog<T: LogDensityGrad + ?Sized>(
    target: &T,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    inv_metric: &[f64],
) -> f64 {
    for i in 0..q.len() {
        p[i] += 0.5 * eps * grad[i];
    }
    for i in 0..q.len() {
        q[i] += eps * inv_metric[i] * p[i];
    }
    let lp = target.log_density_grad(q, grad);
    for i in 0..q.len() {
        p[i] += 0.5 * eps * grad[i];
    }
    lp
}

/// `H(q, p) = −log p(q) + ½ pᵀ M⁻¹ p`.
pub fn hamiltonian(log_p: f64, p: &[f64], inv_metric: &[f64]) -> f64 {
    let kinetic: f64 = p.iter().zip(inv_metric).map(|(pi, m)| pi * pi * m).sum();
    let h = -log_p + 0.5 * kinetic;
    if h.is_nan() {
        f64::INFINITY
    } else {
        h
    }
}

/// Runs `config.chains` chains in parallel, chain `k` from `inits[k]`.
pub fn nuts<T: LogDensityGrad + ?Sized>(
    target: &T,
    config: &NutsConfig,
    inits: &[Vec<f64>],
) -> Result<Vec<Chain>> {
    config.validate()?;
    let dim = target.dim();
    if inits.len() != config.chains {
        return Err(Error::Config(format!(
            "{} initial states for {} chains",
            inits.len(),
            config.chains
        )));
    }
    let mut grad = vec![0.0; dim];
    for (k, x) in inits.iter().enumerate() {
        if x.len() != dim {
            return Err(Error::Config(format!("initial state {k} has length {}, expected {dim}", x.len())));
        }
        let lp = target.log_density_grad(x, &mut grad);
        if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Sampler(format!(
                "chain {k}: log density or gradient is not finite at the initial state"
            )));
        }
    }
    (0..config.chains)
        .into_par_iter()
        .map(|k| {
            let seed = derive_seed(config.seed, k as u64);
            Sampler::new(target, config, &inits[k], seed).run()
        })
        .collect()
}

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    log_p: f64,
}

struct DualAveraging {
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    fn new(eps: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    fn update(&mut self, accept: f64, cfg: &NutsConfig) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + cfg.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (cfg.adapt_delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / cfg.gamma;
        let x_eta = self.counter.powf(-cfg.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Doubling metric-adaptation windows after an initial buffer.
struct Windows {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_end: usize,
    enabled: bool,
}

impl Windows {
    fn new(cfg: &NutsConfig) -> Self {
        let warmup = cfg.warmup;
        let (mut init, mut term, mut base) = (cfg.init_buffer, cfg.term_buffer, cfg.base_window);
        let enabled = warmup >= 20;
        if enabled && init + base + term > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - (init + term);
        }
        Windows {
            warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            next_end: (init + base).saturating_sub(1),
            enabled,
        }
    }

    fn in_window(&self, i: usize) -> bool {
        self.enabled && i >= self.init_buffer && i + self.term_buffer < self.warmup
    }

    fn is_window_end(&self, i: usize) -> bool {
        self.enabled && i == self.next_end && i + 1 < self.warmup
    }

    fn advance(&mut self, i: usize) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_end == last {
            return;
        }
        self.window_size *= 2;
        self.next_end = i + self.window_size;
        if self.next_end != last {
            let boundary = self.next_end + 2 * self.window_size;
            if boundary >= self.warmup - self.term_buffer {
                self.next_end = last;
            }
        }
    }
}

struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    /// Regularised variance, shrunk towards `1e-3`.
    fn regularised_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|m| {
                let var = m / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

struct Transition {
    accept_stat: f64,
    depth: usize,
    divergent: bool,
}

struct Sampler<'a, T: ?Sized> {
    target: &'a T,
    cfg: &'a NutsConfig,
    rng: ChaCha8Rng,
    seed: u64,
    z: Point,
    eps: f64,
    inv_metric: Vec<f64>,
    divergent: bool,
}

impl<'a, T: LogDensityGrad + ?Sized> Sampler<'a, T> {
    fn new(target: &'a T, cfg: &'a NutsConfig, init: &[f64], seed: u64) -> Self {
        let d = init.len();
        let mut grad = vec![0.0; d];
        let log_p = target.log_density_grad(init, &mut grad);
        Sampler {
            target,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            z: Point {
                q: init.to_vec(),
                p: vec![0.0; d],
                grad,
                log_p,
            },
            eps: cfg.step_size_init,
            inv_metric: vec![1.0; d],
            divergent: false,
        }
    }

    fn sample_momentum(&mut self) {
        for (p, m) in self.z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = self.rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    fn h(&self, z: &Point) -> f64 {
        hamiltonian(z.log_p, &z.p, &self.inv_metric)
    }

    fn p_sharp(&self, z: &Point) -> Vec<f64> {
        z.p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn step(&self, z: &mut Point, eps: f64) {
        z.log_p = leapfrog(self.target, &mut z.q, &mut z.p, &mut z.grad, eps, &self.inv_metric);
        if !z.log_p.is_finite() || z.grad.iter().any(|g| !g.is_finite()) {
            z.log_p = f64::NEG_INFINITY;
        }
    }

    /// Doubles or halves the step size until the one-step acceptance
    /// crosses 0.8.
    fn init_step_size(&mut self) -> Result<()> {
        let start = self.z.clone();
        self.sample_momentum();
        let h0 = self.h(&self.z);
        let mut z = self.z.clone();
        self.step(&mut z, self.eps);
        let delta_h = h0 - self.h(&z);
        let direction = if delta_h > 0.8_f64.ln() { 1.0 } else { -1.0 };
        loop {
            self.z = start.clone();
            self.sample_momentum();
            let h0 = self.h(&self.z);
            let mut z = self.z.clone();
            self.step(&mut z, self.eps);
            let delta_h = h0 - self.h(&z);
            if direction > 0.0 && !(delta_h > 0.8_f64.ln()) {
                break;
            }
            if direction < 0.0 && !(delta_h < 0.8_f64.ln()) {
                break;
            }
            self.eps = if direction > 0.0 { 2.0 * self.eps } else { 0.5 * self.eps };
            if self.eps > 1e7 {
                return Err(Error::Sampler("step size diverged during initialisation; target may be improper".into()));
            }
            if self.eps < 1e-300 {
                return Err(Error::Sampler("step size collapsed to zero during initialisation".into()));
            }
        }
        self.z = start;
        Ok(())
    }

    fn transition(&mut self) -> Transition {
        self.sample_momentum();
        self.divergent = false;
        let d = self.z.q.len();
        let p_sharp = self.p_sharp(&self.z);
        let mut z_fwd = self.z.clone();
        let mut z_bck = self.z.clone();
        let mut z_sample = self.z.clone();
        let mut z_propose = self.z.clone();

        let (mut p_fwd_fwd, mut p_sharp_fwd_fwd) = (self.z.p.clone(), p_sharp.clone());
        let (mut p_fwd_bck, mut p_sharp_fwd_bck) = (self.z.p.clone(), p_sharp.clone());
        let (mut p_bck_fwd, mut p_sharp_bck_fwd) = (self.z.p.clone(), p_sharp.clone());
        let (mut p_bck_bck, mut p_sharp_bck_bck) = (self.z.p.clone(), p_sharp);

        let mut rho = self.z.p.clone();
        let mut log_sum_weight = 0.0;
        let h0 = self.h(&self.z);
        let mut n_leapfrog = 0usize;
        let mut sum_metro_prob = 0.0;
        let mut depth = 0;

        while depth < self.cfg.max_tree_depth {
            let mut rho_fwd = vec![0.0; d];
            let mut rho_bck = vec![0.0; d];
            let mut log_sum_weight_subtree = f64::NEG_INFINITY;
            let valid;
            if self.rng.random::<f64>() > 0.5 {
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.copy_from_slice(&p_fwd_bck);
                p_sharp_bck_fwd.copy_from_slice(&p_sharp_fwd_bck);
                let mut z = z_fwd.clone();
                valid = self.build_tree(
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut n_leapfrog,
                    &mut log_sum_weight_subtree,
                    &mut sum_metro_prob,
                );
                z_fwd = z;
            } else {
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.copy_from_slice(&p_bck_fwd);
                p_sharp_fwd_bck.copy_from_slice(&p_sharp_bck_fwd);
                let mut z = z_bck.clone();
                valid = self.build_tree(
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut n_leapfrog,
                    &mut log_sum_weight_subtree,
                    &mut sum_metro_prob,
                );
                z_bck = z;
            }
            if !valid {
                break;
            }
            depth += 1;

            if log_sum_weight_subtree > log_sum_weight {
                z_sample = z_propose.clone();
            } else {
                let accept = (log_sum_weight_subtree - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample = z_propose.clone();
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

            for i in 0..d {
                rho[i] = rho_bck[i] + rho_fwd[i];
            }
            let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let ext: Vec<f64> = (0..d).map(|i| rho_bck[i] + p_fwd_bck[i]).collect();
            persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &ext);
            let ext: Vec<f64> = (0..d).map(|i| rho_fwd[i] + p_bck_fwd[i]).collect();
            persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }

        self.z = z_sample;
        Transition {
            accept_stat: if n_leapfrog > 0 { sum_metro_prob / n_leapfrog as f64 } else { 0.0 },
            depth,
            divergent: self.divergent,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        n_leapfrog: &mut usize,
        log_sum_weight: &mut f64,
        sum_metro_prob: &mut f64,
    ) -> bool {
        let d = z.q.len();
        if depth == 0 {
            self.step(z, sign * self.eps);
            *n_leapfrog += 1;
            let h = self.h(z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            *sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            *z_propose = z.clone();
            *p_sharp_beg = self.p_sharp(z);
            p_sharp_end.clone_from(p_sharp_beg);
            for i in 0..d {
                rho[i] += z.p[i];
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !self.divergent;
        }

        // Initial subtree.
        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; d];
        let mut p_sharp_init_end = vec![0.0; d];
        let mut rho_init = vec![0.0; d];
        let valid_init = self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            n_leapfrog,
            &mut lsw_init,
            sum_metro_prob,
        );
        if !valid_init {
            return false;
        }

        // Final subtree.
        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; d];
        let mut p_sharp_final_beg = vec![0.0; d];
        let mut rho_final = vec![0.0; d];
        let valid_final = self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            n_leapfrog,
            &mut lsw_final,
            sum_metro_prob,
        );
        if !valid_final {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree: Vec<f64> = (0..d).map(|i| rho_init[i] + rho_final[i]).collect();
        for i in 0..d {
            rho[i] += rho_subtree[i];
        }
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let ext: Vec<f64> = (0..d).map(|i| rho_init[i] + p_final_beg[i]).collect();
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &ext);
        let ext: Vec<f64> = (0..d).map(|i| rho_final[i] + p_init_end[i]).collect();
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &ext);
        persist
    }

    fn snapshot(&self, iteration: usize) -> AdaptationSnapshot {
        AdaptationSnapshot {
            iteration,
            step_sizes: vec![self.eps],
            diagonal: self.inv_metric.clone(),
        }
    }

    fn run(mut self) -> Result<Chain> {
        let cfg = self.cfg;
        let d = self.z.q.len();
        self.init_step_size()?;
        let mut dual = DualAveraging::new(self.eps);
        let mut windows = Windows::new(cfg);
        let mut estimator = Welford::new(d);
        let mut record = AdaptationRecord {
            frozen_at: cfg.warmup,
            snapshots: vec![self.snapshot(0)],
        };

        let mut warmup_divergences = 0;
        for i in 0..cfg.warmup {
            let t = self.transition();
            warmup_divergences += t.divergent as usize;
            self.eps = dual.update(t.accept_stat, cfg);
            if windows.in_window(i) {
                estimator.push(&self.z.q);
            }
            if windows.is_window_end(i) {
                windows.advance(i);
                self.inv_metric = estimator.regularised_variance();
                estimator = Welford::new(d);
                self.init_step_size()?;
                dual = DualAveraging::new(self.eps);
                record.snapshots.push(self.snapshot(i + 1));
            }
        }
        if cfg.warmup > 0 {
            if warmup_divergences == cfg.warmup {
                return Err(Error::Sampler(format!(
                    "all {} warmup transitions diverged",
                    cfg.warmup
                )));
            }
            self.eps = dual.final_step();
        }
        record.snapshots.push(self.snapshot(cfg.warmup));

        let total = cfg.draws;
        let mut draws = Vec::with_capacity(total / cfg.thin + 1);
        let mut divergent = Vec::with_capacity(total / cfg.thin + 1);
        let mut tree_depth = Vec::with_capacity(total / cfg.thin + 1);
        let mut divergences = 0;
        let mut accept_sum = 0.0;
        for i in 0..total {
            let t = self.transition();
            divergences += t.divergent as usize;
            accept_sum += t.accept_stat;
            if i % cfg.thin == 0 {
                draws.push(self.z.q.clone());
                divergent.push(t.divergent);
                tree_depth.push(t.depth);
            }
        }
        record.snapshots.push(self.snapshot(cfg.warmup + total));

        let acceptance_rate = accept_sum / total as f64;
        let mut warnings = Vec::new();
        if divergences > 0 {
            warnings.push(format!("{divergences} divergent transitions after warmup"));
        }
        let saturated = tree_depth.iter().filter(|&&t| t >= cfg.max_tree_depth).count();
        if saturated > 0 {
            warnings.push(format!("{saturated} transitions hit the maximum tree depth"));
        }
        Ok(Chain {
            draws,
            acceptance_rate,
            block_acceptance: vec![acceptance_rate],
            divergences,
            divergent,
            tree_depth,
            warmup_divergences,
            seed: self.seed,
            adaptation: record,
            warnings,
        })
    }
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::FnTarget;

    fn gaussian(scales: Vec<f64>) -> impl LogDensityGrad {
        let s2 = scales.clone();
        FnTarget::with_gradient(
            scales.len(),
            move |x: &[f64]| -0.5 * x.iter().zip(&scales).map(|(v, s)| (v / s).powi(2)).sum::<f64>(),
            move |x: &[f64], g: &mut [f64]| {
                let mut lp = 0.0;
                for i in 0..x.len() {
                    g[i] = -x[i] / (s2[i] * s2[i]);
                    lp -= 0.5 * (x[i] / s2[i]).powi(2);
                }
                lp
            },
        )
    }

    #[test]
    fn leapfrog_is_reversible() {
        let t = gaussian(vec![1.0, 2.0, 0.5]);
        let inv = [1.0, 0.5, 2.0];
        let q0 = vec![0.3, -1.2, 0.7];
        let p0 = vec![1.0, 0.2, -0.4];
        let (mut q, mut p) = (q0.clone(), p0.clone());
        let mut g = vec![0.0; 3];
        t.log_density_grad(&q, &mut g);
        for _ in 0..50 {
            leapfrog(&t, &mut q, &mut p, &mut g, 0.1, &inv);
        }
        p.iter_mut().for_each(|v| *v = -*v);
        for _ in 0..50 {
            leapfrog(&t, &mut q, &mut p, &mut g, 0.1, &inv);
        }
        for i in 0..3 {
            assert!((q[i] - q0[i]).abs() < 1e-10);
            assert!((-p[i] - p0[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn energy_is_conserved_with_tiny_steps() {
        let t = gaussian(vec![1.0, 3.0]);
        let inv = [1.0, 1.0];
        let mut q = vec![1.0, -2.0];
        let mut p = vec![0.5, 0.7];
        let mut g = vec![0.0; 2];
        let lp0 = t.log_density_grad(&q, &mut g);
        let h0 = hamiltonian(lp0, &p, &inv);
        for _ in 0..1000 {
            let lp = leapfrog(&t, &mut q, &mut p, &mut g, 1e-4, &inv);
            assert!((hamiltonian(lp, &p, &inv) - h0).abs() < 1e-6);
        }
    }

    #[test]
    fn window_schedule_matches_default_layout() {
        let cfg = NutsConfig::default();
        let w = Windows::new(&cfg);
        assert_eq!((w.init_buffer, w.term_buffer, w.window_size, w.next_end), (75, 50, 25, 99));
        let small = NutsConfig {
            warmup: 100,
            ..Default::default()
        };
        let w = Windows::new(&small);
        assert_eq!((w.init_buffer, w.term_buffer, w.window_size), (15, 10, 75));
    }

    #[test]
    fn standard_normal_moments() {
        let t = gaussian(vec![1.0; 4]);
        let cfg = NutsConfig {
            chains: 2,
            warmup: 500,
            draws: 4000,
            seed: 9,
            ..Default::default()
        };
        let chains = nuts(&t, &cfg, &vec![vec![0.5; 4]; 2]).unwrap();
        for k in 0..4 {
            let xs: Vec<f64> = chains.iter().flat_map(|c| c.column(k)).collect();
            let m = crate::stats::mean(&xs);
            let v = crate::stats::variance(&xs);
            assert!(m.abs() < 0.08, "mean {m}");
            assert!((v - 1.0).abs() < 0.1, "variance {v}");
        }
        for c in &chains {
            assert_eq!(c.divergences, 0);
            assert!(c.adaptation.is_frozen_after_warmup());
        }
    }

    #[test]
    fn metric_learns_scales() {
        let t = gaussian(vec![0.1, 10.0]);
        let cfg = NutsConfig {
            chains: 1,
            warmup: 1000,
            draws: 200,
            seed: 4,
            adapt_delta: 0.8,
            ..Default::default()
        };
        let c = &nuts(&t, &cfg, &[vec![0.0, 0.0]]).unwrap()[0];
        let inv = &c.adaptation.snapshots.last().unwrap().diagonal;
        assert!(inv[0] < 0.03 && inv[1] > 30.0, "{inv:?}");
    }

    #[test]
    fn depth_one_still_samples() {
        let t = gaussian(vec![1.0; 2]);
        let cfg = NutsConfig {
            chains: 1,
            warmup: 500,
            draws: 20_000,
            max_tree_depth: 1,
            seed: 2,
            adapt_delta: 0.8,
            ..Default::default()
        };
        let c = &nuts(&t, &cfg, &[vec![0.0, 0.0]]).unwrap()[0];
        assert!(c.tree_depth.iter().all(|&d| d <= 1));
        let xs = c.column(0);
        assert!(crate::stats::mean(&xs).abs() < 0.15);
        assert!((crate::stats::variance(&xs) - 1.0).abs() < 0.2);
    }

    #[test]
    fn non_finite_initial_gradient_is_rejected() {
        let t = FnTarget::with_gradient(
            1,
            |_: &[f64]| 0.0,
            |_: &[f64], g: &mut [f64]| {
                g[0] = f64::NAN;
                0.0
            },
        );
        let cfg = NutsConfig {
            chains: 1,
            ..Default::default()
        };
        assert!(nuts(&t, &cfg, &[vec![0.0]]).is_err());
    }
}
