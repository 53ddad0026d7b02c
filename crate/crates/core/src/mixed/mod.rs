//! Stage two: Bayesian mixed-effects model over the unconstrained tendon
//! parameters.
//!
//! Each tendon's `ξ_i` is drawn from `N(μ_pop, Σ_pop)` with
//! `Σ_pop = S C S`, `S = diag(s)` and `C = L_C L_Cᵀ`. Priors are normal on
//! `μ_pop`, half-Student-t(3) on `s` and LKJ(1) on `C`. The likelihood is
//! Gaussian with each squared residual scaled by its stage-one fidelity.
//!
//! NUTS runs on `[ξ or z, μ_pop, ln s, CPC(L_C)]`, where `z` are the
//! standardised effects of the non-centred form `ξ_i = μ_pop + S L_C z_i`.

pub mod corr;
pub mod dual;
pub mod predict;

use nalgebra::{Matrix4, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::constitutive::{
    stress_and_gradient_xi, to_unconstrained, ModelParams, UnconstrainedParams,
};
use crate::dataio::{ChainTable, Experiment, Population};
use crate::error::{Error, Result};
use crate::fidelity::{least_squares_start, XiPrior, XI_PRIOR_MEAN, XI_PRIOR_SD};
use crate::samplers::diagnostics::{report, DiagnosticsReport};
use crate::samplers::{derive_seed, nuts, Chain, LogDensity, LogDensityGrad, NutsConfig};
use crate::stats::LN_SQRT_2PI;
use corr::{cpc_cholesky, lkj_cholesky_log_density, lower_pairs, N_CORR};
use dual::{Dual, Real};

pub use predict::{
    linear_modulus_comparison, lognormal_moment_match, posterior_predictive_params,
    posterior_predictive_stress, LinearModulusComparison, PredictiveParams, StressBands,
};

/// Degrees of freedom of the half-Student-t prior on the population scales.
pub const SCALE_PRIOR_DF: f64 = 3.0;
/// LKJ shape of the correlation prior.
pub const LKJ_ETA: f64 = 1.0;

const HYPER: usize = 4 + N_CORR;

/// `log p(s)` of a half-Student-t with `df` degrees of freedom and unit scale.
pub fn half_t_log_pdf(s: f64, df: f64) -> f64 {
    if !(s >= 0.0) {
        return f64::NEG_INFINITY;
    }
    half_t_constant(df) - 0.5 * (df + 1.0) * (s * s / df).ln_1p()
}

fn half_t_constant(df: f64) -> f64 {
    std::f64::consts::LN_2 + ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df) - 0.5 * (df * std::f64::consts::PI).ln()
}

/// Population mean, scales and correlation Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationParams {
    pub mu_pop: [f64; 4],
    pub scales: [f64; 4],
    pub corr_chol: Matrix4<f64>,
}

impl PopulationParams {
    pub fn new(mu_pop: [f64; 4], scales: [f64; 4], corr_chol: Matrix4<f64>) -> Result<Self> {
        let p = PopulationParams {
            mu_pop,
            scales,
            corr_chol,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_pop.iter().any(|m| !m.is_finite()) {
            return Err(Error::domain("non-finite population mean"));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::domain(format!("population scales must be positive, got {:?}", self.scales)));
        }
        corr::validate_corr_cholesky(&self.corr_chol)
    }

    /// `S L_C`, the Cholesky factor of `Σ_pop`.
    pub fn cov_cholesky(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::from(self.scales)) * self.corr_chol
    }

    pub fn correlation(&self) -> Matrix4<f64> {
        self.corr_chol * self.corr_chol.transpose()
    }

    /// `Σ_pop = S C S`.
    pub fn covariance(&self) -> Matrix4<f64> {
        let m = self.cov_cholesky();
        m * m.transpose()
    }

    /// Builds the parameters from scales and a correlation matrix.
    pub fn from_correlation(mu_pop: [f64; 4], scales: [f64; 4], corr: &Matrix4<f64>) -> Result<Self> {
        let l = corr
            .cholesky()
            .ok_or_else(|| Error::domain("correlation matrix is not positive definite"))?
            .l();
        PopulationParams::new(mu_pop, scales, l)
    }
}

/// Per-tendon unconstrained parameters plus population parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedEffectsState {
    pub xi: Vec<[f64; 4]>,
    pub pop: PopulationParams,
}

/// `log N(μ_pop; prior) + Σ log half-t(s_k) + log LKJ(L_C; 1)`.
///
/// The LKJ term is the density of the Cholesky factor, so it includes the
/// Jacobian of `C ↦ L_C`.
pub fn population_log_prior(pop: &PopulationParams) -> f64 {
    if pop.scales.iter().any(|s| !(*s > 0.0)) {
        return f64::NEG_INFINITY;
    }
    let mu = XiPrior::default().log_density(&pop.mu_pop);
    let s: f64 = pop.scales.iter().map(|&s| half_t_log_pdf(s, SCALE_PRIOR_DF)).sum();
    let l: [[f64; 4]; 4] = std::array::from_fn(|i| std::array::from_fn(|j| pop.corr_chol[(i, j)]));
    mu + s + lkj_cholesky_log_density(&l, LKJ_ETA)
}

/// One trimmed, weighted experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedData {
    pub id: String,
    pub stretch: Vec<f64>,
    pub stress: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl WeightedData {
    pub fn from_experiment(e: &Experiment) -> Self {
        WeightedData {
            id: e.id().to_string(),
            stretch: e.stretch().to_vec(),
            stress: e.stress().to_vec(),
            gamma: e.weights(),
        }
    }

    /// `Σ_j [−γ_j r_j²/2σ² − ln σ − ln √(2π)]`, optionally with its gradient
    /// in `ξ`; `−∞` when the model is not finite.
    pub fn log_likelihood(&self, xi: &[f64; 4], sigma: f64, grad: Option<&mut [f64; 4]>) -> f64 {
        let u = UnconstrainedParams::from_slice(xi);
        let inv_var = 1.0 / (sigma * sigma);
        let mut ll = -(self.stretch.len() as f64) * (sigma.ln() + LN_SQRT_2PI);
        let mut g = [0.0; 4];
        for j in 0..self.stretch.len() {
            let (m, dm) = stress_and_gradient_xi(self.stretch[j], &u);
            let r = self.stress[j] - m;
            ll -= 0.5 * self.gamma[j] * r * r * inv_var;
            let w = self.gamma[j] * r * inv_var;
            for k in 0..4 {
                g[k] += w * dm[k];
            }
        }
        if !ll.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        if let Some(out) = grad {
            *out = g;
        }
        ll
    }
}

/// Stage-two data: weighted experiments sharing `σ_obs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedData {
    pub experiments: Vec<WeightedData>,
    pub sigma_obs: f64,
}

impl MixedData {
    pub fn from_population(pop: &Population) -> Result<Self> {
        if pop.is_empty() {
            return Err(Error::Data("population has no experiments".into()));
        }
        Ok(MixedData {
            experiments: pop.experiments().iter().map(WeightedData::from_experiment).collect(),
            sigma_obs: pop.sigma_obs(),
        })
    }

    pub fn len(&self) -> usize {
        self.experiments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiments.is_empty()
    }
}

/// `log N(x; μ, M Mᵀ)` for lower-triangular `M`.
fn mvn_log_pdf_chol(x: &[f64; 4], mu: &[f64; 4], m: &Matrix4<f64>) -> f64 {
    let d = Vector4::from(*x) - Vector4::from(*mu);
    let Some(v) = m.solve_lower_triangular(&d) else {
        return f64::NEG_INFINITY;
    };
    let log_det: f64 = (0..4).map(|k| m[(k, k)].ln()).sum();
    -0.5 * v.norm_squared() - log_det - 4.0 * LN_SQRT_2PI
}

/// Joint log posterior at a state in constrained population coordinates.
pub fn mixed_log_posterior(state: &MixedEffectsState, data: &MixedData) -> Result<f64> {
    if state.xi.len() != data.len() {
        return Err(Error::Data(format!(
            "{} tendon parameter vectors for {} experiments",
            state.xi.len(),
            data.len()
        )));
    }
    if state.xi.iter().flatten().any(|v| !v.is_finite()) {
        return Ok(f64::NEG_INFINITY);
    }
    let prior = population_log_prior(&state.pop);
    if prior == f64::NEG_INFINITY {
        return Ok(prior);
    }
    let m = state.pop.cov_cholesky();
    let mut lp = prior;
    for (xi, e) in state.xi.iter().zip(&data.experiments) {
        lp += e.log_likelihood(xi, data.sigma_obs, None) + mvn_log_pdf_chol(xi, &state.pop.mu_pop, &m);
    }
    Ok(if lp.is_nan() { f64::NEG_INFINITY } else { lp })
}

/// The same posterior over `θ_i = T(ξ_i)`: each population term carries
/// `|∂ξ/∂θ| = 1 / (ncm · fib · (a − 1) · (b − a))`.
pub fn untransformed_log_posterior(thetas: &[ModelParams], pop: &PopulationParams, data: &MixedData) -> Result<f64> {
    if thetas.len() != data.len() {
        return Err(Error::Data(format!("{} parameter sets for {} experiments", thetas.len(), data.len())));
    }
    let m = pop.cov_cholesky();
    let mut lp = population_log_prior(pop);
    for (t, e) in thetas.iter().zip(&data.experiments) {
        let xi = to_unconstrained(t)?.to_array();
        let inv_jac = -(t.ncm_term.ln() + t.fibril_term.ln() + (t.a - 1.0).ln() + (t.b - t.a).ln());
        lp += e.log_likelihood(&xi, data.sigma_obs, None) + mvn_log_pdf_chol(&xi, &pop.mu_pop, &m) + inv_jac;
    }
    Ok(lp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// Sample `ξ_i` directly.
    Centered,
    /// Sample `z_i` with `ξ_i = μ_pop + S L_C z_i`.
    #[default]
    NonCentered,
}

/// `S L_C` and the hyperprior terms with derivatives in `[ln s, CPC]`.
struct Hyper {
    m: Matrix4<f64>,
    dm: [Matrix4<f64>; HYPER],
    lp: f64,
    dlp: [f64; HYPER],
}

/// `Σ log half-t(s) + Σ ln s + log LKJ(L) + CPC Jacobian − n_logdet Σ ln M_kk`.
fn hyper_terms(log_s: &[f64], cpc: &[f64], n_logdet: f64) -> Hyper {
    type D = Dual<HYPER>;
    let u: [D; 4] = std::array::from_fn(|k| D::variable(log_s[k], k));
    let z: [D; N_CORR] = std::array::from_fn(|k| D::variable(cpc[k], 4 + k));
    let (l, cpc_jac) = cpc_cholesky(&z);
    let df = SCALE_PRIOR_DF;
    let mut lp = cpc_jac + lkj_cholesky_log_density(&l, LKJ_ETA);
    let mut m = [[D::constant(0.0); 4]; 4];
    for i in 0..4 {
        let s = u[i].exp();
        // ln half-t(s) + ln s, with the Jacobian of s = e^u.
        let t = (D::constant(1.0) + s * s / D::constant(df)).ln();
        lp = lp + D::constant(half_t_constant(df)) - t.scale(0.5 * (df + 1.0)) + u[i];
        for j in 0..=i {
            m[i][j] = s * l[i][j];
        }
        lp = lp - m[i][i].ln().scale(n_logdet);
    }
    Hyper {
        m: Matrix4::from_fn(|i, j| m[i][j].v),
        dm: std::array::from_fn(|k| Matrix4::from_fn(|i, j| m[i][j].d[k])),
        lp: lp.v,
        dlp: lp.d,
    }
}

/// NUTS target over `[ξ₁ … ξ_N or z₁ … z_N, μ_pop, ln s, CPC]`.
pub struct MixedTarget {
    data: MixedData,
    parameterization: Parameterization,
    mu_prior: XiPrior,
}

impl MixedTarget {
    pub fn new(data: MixedData, parameterization: Parameterization) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("population has no experiments".into()));
        }
        if let Some(e) = data.experiments.iter().find(|e| e.stretch.is_empty()) {
            return Err(Error::Data(format!("{}: no data survives selection", e.id)));
        }
        if !(data.sigma_obs > 0.0 && data.sigma_obs.is_finite()) {
            return Err(Error::Config(format!("σ_obs must be positive, got {}", data.sigma_obs)));
        }
        Ok(MixedTarget {
            data,
            parameterization,
            mu_prior: XiPrior::default(),
        })
    }

    pub fn data(&self) -> &MixedData {
        &self.data
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    pub fn n_experiments(&self) -> usize {
        self.data.len()
    }

    fn offset(&self) -> usize {
        4 * self.data.len()
    }

    /// Maps unconstrained coordinates to a state.
    pub fn state(&self, x: &[f64]) -> MixedEffectsState {
        let o = self.offset();
        let mu: [f64; 4] = std::array::from_fn(|k| x[o + k]);
        let scales: [f64; 4] = std::array::from_fn(|k| x[o + 4 + k].exp());
        let (l, _) = cpc_cholesky(&x[o + 8..o + 8 + N_CORR]);
        let pop = PopulationParams {
            mu_pop: mu,
            scales,
            corr_chol: corr::to_matrix(&l),
        };
        let m = pop.cov_cholesky();
        let xi = (0..self.data.len())
            .map(|i| {
                let v: [f64; 4] = std::array::from_fn(|k| x[4 * i + k]);
                match self.parameterization {
                    Parameterization::Centered => v,
                    Parameterization::NonCentered => (Vector4::from(mu) + m * Vector4::from(v)).into(),
                }
            })
            .collect();
        MixedEffectsState { xi, pop }
    }

    /// Inverse of [`MixedTarget::state`].
    pub fn unconstrain(&self, state: &MixedEffectsState) -> Result<Vec<f64>> {
        state.pop.validate()?;
        if state.xi.len() != self.data.len() {
            return Err(Error::Data("state and data disagree on the number of experiments".into()));
        }
        let m = state.pop.cov_cholesky();
        let mut x = Vec::with_capacity(self.dim());
        for xi in &state.xi {
            match self.parameterization {
                Parameterization::Centered => x.extend_from_slice(xi),
                Parameterization::NonCentered => {
                    let d = Vector4::from(*xi) - Vector4::from(state.pop.mu_pop);
                    let z = m
                        .solve_lower_triangular(&d)
                        .ok_or_else(|| Error::domain("singular population covariance"))?;
                    x.extend(z.iter());
                }
            }
        }
        x.extend_from_slice(&state.pop.mu_pop);
        x.extend(state.pop.scales.iter().map(|s| s.ln()));
        x.extend(corr::cholesky_to_cpc(&state.pop.corr_chol)?);
        Ok(x)
    }

    /// Log density and, if requested, its gradient.
    fn evaluate(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let o = self.offset();
        let n = self.data.len();
        let mu: [f64; 4] = std::array::from_fn(|k| x[o + k]);
        let centered = self.parameterization == Parameterization::Centered;
        let hyper = hyper_terms(&x[o + 4..o + 8], &x[o + 8..o + 8 + N_CORR], if centered { n as f64 } else { 0.0 });
        let m = hyper.m;
        let mut lp = hyper.lp;
        let mut g_m = Matrix4::<f64>::zeros();
        let mut g_mu = [0.0; 4];
        for k in 0..4 {
            let z = (mu[k] - self.mu_prior.mean[k]) / self.mu_prior.sd[k];
            lp += -0.5 * z * z - self.mu_prior.sd[k].ln() - LN_SQRT_2PI;
            g_mu[k] = -z / self.mu_prior.sd[k];
        }
        let mut g_lik = [0.0; 4];
        for (i, e) in self.data.experiments.iter().enumerate() {
            let v = Vector4::from_column_slice(&x[4 * i..4 * i + 4]);
            let xi: [f64; 4] = if centered {
                v.into()
            } else {
                (Vector4::from(mu) + m * v).into()
            };
            let ll = e.log_likelihood(&xi, self.data.sigma_obs, Some(&mut g_lik));
            if ll == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            lp += ll - 4.0 * LN_SQRT_2PI;
            let g_lik_v = Vector4::from(g_lik);
            if centered {
                // −½|M⁻¹d|²: ∂/∂ξ = −M⁻ᵀ M⁻¹ d, ∂/∂M = M⁻ᵀ M⁻¹ d (M⁻¹ d)ᵀ.
                let d = v - Vector4::from(mu);
                let Some(w) = m.solve_lower_triangular(&d) else {
                    return f64::NEG_INFINITY;
                };
                let Some(q) = m.transpose().solve_upper_triangular(&w) else {
                    return f64::NEG_INFINITY;
                };
                lp -= 0.5 * w.norm_squared();
                if let Some(g) = grad.as_deref_mut() {
                    for k in 0..4 {
                        g[4 * i + k] = g_lik[k] - q[k];
                        g_mu[k] += q[k];
                    }
                    g_m += q * w.transpose();
                }
            } else {
                lp -= 0.5 * v.norm_squared();
                if let Some(g) = grad.as_deref_mut() {
                    let gz = m.transpose() * g_lik_v - v;
                    for k in 0..4 {
                        g[4 * i + k] = gz[k];
                        g_mu[k] += g_lik[k];
                    }
                    g_m += g_lik_v * v.transpose();
                }
            }
        }
        if let Some(g) = grad {
            g[o..o + 4].copy_from_slice(&g_mu);
            for h in 0..HYPER {
                let dm = &hyper.dm[h];
                let mut acc = hyper.dlp[h];
                for i in 0..4 {
                    for j in 0..=i {
                        acc += g_m[(i, j)] * dm[(i, j)];
                    }
                }
                g[o + 4 + h] = acc;
            }
        }
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }
}

impl LogDensity for MixedTarget {
    fn dim(&self) -> usize {
        self.offset() + 4 + 4 + N_CORR
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.evaluate(x, None)
    }
}

impl LogDensityGrad for MixedTarget {
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(x, Some(grad))
    }
}

/// Stage-two run settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedConfig {
    pub nuts: NutsConfig,
    pub parameterization: Parameterization,
    pub rhat_threshold: f64,
    /// Standard deviation of the per-chain jitter applied to starting values.
    pub init_jitter: f64,
}

impl Default for MixedConfig {
    fn default() -> Self {
        MixedConfig {
            nuts: NutsConfig::default(),
            parameterization: Parameterization::default(),
            rhat_threshold: 1.05,
            init_jitter: 0.1,
        }
    }
}

impl MixedConfig {
    /// Ten chains of 4000 draws.
    pub fn paper_scale(mut self) -> Self {
        self.nuts.chains = 10;
        self.nuts.draws = 4000;
        self
    }
}

/// Output column names: `ξ` per tendon, `μ_pop`, scales, correlations.
pub fn output_columns(ids: &[String]) -> Vec<String> {
    let names = UnconstrainedParams::NAMES;
    let mut out = Vec::new();
    for id in ids {
        out.extend(names.iter().map(|n| format!("xi[{id}].{n}")));
    }
    out.extend(names.iter().map(|n| format!("mu_pop.{n}")));
    out.extend(names.iter().map(|n| format!("scale.{n}")));
    out.extend(lower_pairs().iter().map(|(i, j)| format!("corr.{}.{}", names[*i], names[*j])));
    out
}

fn output_row(state: &MixedEffectsState) -> Vec<f64> {
    let mut row: Vec<f64> = state.xi.iter().flatten().copied().collect();
    row.extend_from_slice(&state.pop.mu_pop);
    row.extend_from_slice(&state.pop.scales);
    let c = state.pop.correlation();
    row.extend(lower_pairs().iter().map(|(i, j)| c[(*i, *j)]));
    row
}

/// Posterior draws of the mixed-effects model in output columns.
#[derive(Debug, Clone)]
pub struct PopulationPosterior {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    /// Per-chain draws in [`output_columns`] order, with sampler statistics.
    pub chains: Vec<Chain>,
    pub diagnostics: DiagnosticsReport,
    pub converged: bool,
}

impl PopulationPosterior {
    /// Rebuilds a posterior from persisted chain tables.
    pub fn from_tables(ids: Vec<String>, tables: Vec<ChainTable>, rhat_threshold: f64) -> Result<Self> {
        let columns = output_columns(&ids);
        let chains: Vec<Chain> = tables
            .into_iter()
            .map(|t| {
                if t.columns != columns {
                    return Err(Error::Data("chain columns do not match the experiment list".into()));
                }
                Ok(Chain::from_draws(t.draws))
            })
            .collect::<Result<_>>()?;
        Self::assemble(ids, chains, rhat_threshold)
    }

    fn assemble(ids: Vec<String>, chains: Vec<Chain>, rhat_threshold: f64) -> Result<Self> {
        let columns = output_columns(&ids);
        let diagnostics = report(&chains, &columns)?;
        let converged = diagnostics.converged(rhat_threshold);
        Ok(PopulationPosterior {
            ids,
            columns,
            chains,
            diagnostics,
            converged,
        })
    }

    pub fn n_experiments(&self) -> usize {
        self.ids.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    /// All draws, chains concatenated in order.
    pub fn draws(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    fn pop_offset(&self) -> usize {
        4 * self.ids.len()
    }

    /// Population parameters of one output row.
    pub fn population_at(&self, row: &[f64]) -> Result<PopulationParams> {
        let o = self.pop_offset();
        let mu: [f64; 4] = std::array::from_fn(|k| row[o + k]);
        let s: [f64; 4] = std::array::from_fn(|k| row[o + 4 + k]);
        let mut c = Matrix4::identity();
        for (k, (i, j)) in lower_pairs().into_iter().enumerate() {
            c[(i, j)] = row[o + 8 + k];
            c[(j, i)] = row[o + 8 + k];
        }
        PopulationParams::from_correlation(mu, s, &c)
    }

    /// `ξ_i` of one output row.
    pub fn xi_at(&self, row: &[f64], tendon: usize) -> [f64; 4] {
        std::array::from_fn(|k| row[4 * tendon + k])
    }

    /// Draws of `μ_pop` component `k`.
    pub fn mu_pop_draws(&self, k: usize) -> Vec<f64> {
        let c = self.pop_offset() + k;
        self.draws().map(|r| r[c]).collect()
    }

    /// Draws of tendon `i`'s `ξ` component `k`.
    pub fn xi_draws(&self, tendon: usize, k: usize) -> Vec<f64> {
        self.draws().map(|r| r[4 * tendon + k]).collect()
    }

    /// Central credible interval of `μ_pop` component `k`.
    pub fn mu_pop_interval(&self, k: usize, level: f64) -> (f64, f64) {
        let d = self.mu_pop_draws(k);
        let tail = 0.5 * (1.0 - level);
        (crate::stats::quantile(&d, tail), crate::stats::quantile(&d, 1.0 - tail))
    }

    pub fn total_divergences(&self) -> usize {
        self.chains.iter().map(|c| c.divergences).sum()
    }
}

/// Starting states: per-tendon penalised least squares, pooled moments for
/// the population, identity correlation; jittered per chain.
pub fn initial_states(target: &MixedTarget, chains: usize, jitter: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let prior = XiPrior::default();
    let fits: Vec<[f64; 4]> = target
        .data
        .experiments
        .iter()
        .map(|e| {
            let exp = Experiment::new(e.id.clone(), crate::dataio::TendonType::Sdft, e.stretch.clone(), e.stress.clone());
            match exp {
                Ok(exp) => least_squares_start(&exp, &prior),
                Err(_) => XI_PRIOR_MEAN,
            }
        })
        .collect();
    let n = fits.len() as f64;
    let mean: [f64; 4] = std::array::from_fn(|k| fits.iter().map(|f| f[k]).sum::<f64>() / n);
    let scales: [f64; 4] = std::array::from_fn(|k| {
        if fits.len() < 2 {
            0.5 * XI_PRIOR_SD[k]
        } else {
            let v = fits.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0);
            v.sqrt().max(0.05)
        }
    });
    let mut out = Vec::with_capacity(chains);
    for c in 0..chains {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x1417, c as u64));
        let mut jit = |v: f64, sd: f64| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + jitter * sd * z
        };
        let xi: Vec<[f64; 4]> = fits.iter().map(|f| std::array::from_fn(|k| jit(f[k], 0.1))).collect();
        let mu: [f64; 4] = std::array::from_fn(|k| jit(mean[k], scales[k]));
        let s: [f64; 4] = std::array::from_fn(|k| (jit(scales[k].ln(), 1.0)).exp());
        let state = MixedEffectsState {
            xi,
            pop: PopulationParams::new(mu, s, Matrix4::identity())?,
        };
        let x = target.unconstrain(&state)?;
        if !target.log_density(&x).is_finite() {
            return Err(Error::Sampler(format!("chain {c}: non-finite initial population density")));
        }
        out.push(x);
    }
    Ok(out)
}

/// Fits the mixed-effects model with NUTS.
pub fn fit_population(population: &Population, config: &MixedConfig) -> Result<PopulationPosterior> {
    let data = MixedData::from_population(population)?;
    let ids: Vec<String> = data.experiments.iter().map(|e| e.id.clone()).collect();
    let target = MixedTarget::new(data, config.parameterization)?;
    let inits = initial_states(&target, config.nuts.chains, config.init_jitter, config.nuts.seed)?;
    let raw = nuts(&target, &config.nuts, &inits)?;
    let chains = raw
        .into_iter()
        .map(|mut c| {
            c.draws = c.draws.iter().map(|x| output_row(&target.state(x))).collect();
            c
        })
        .collect();
    PopulationPosterior::assemble(ids, chains, config.rhat_threshold)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::constitutive::{from_unconstrained, log_abs_det_jacobian};
    use crate::dataio::TendonType;
    use crate::stats::normal_log_pdf;
    use crate::synth::integrate;

    fn data(n_e: usize) -> MixedData {
        let p = ModelParams::new(2.5, 900.0, 1.022, 1.05).unwrap();
        let experiments = (0..n_e)
            .map(|i| {
                let stretch: Vec<f64> = (0..25).map(|j| 1.0 + 0.003 * j as f64).collect();
                let stress = stretch
                    .iter()
                    .enumerate()
                    .map(|(j, &l)| crate::constitutive::engineering_stress(l, &p).unwrap() + 0.2 * ((i * 7 + j) as f64).sin())
                    .collect();
                let gamma = (0..25).map(|j| 1.0 - 0.02 * j as f64).collect();
                WeightedData {
                    id: format!("t{i}"),
                    stretch,
                    stress,
                    gamma,
                }
            })
            .collect();
        MixedData {
            experiments,
            sigma_obs: 0.4,
        }
    }

    fn state(n_e: usize, seed: u64) -> MixedEffectsState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = || -> f64 { StandardNormal.sample(&mut rng) };
        let xi = (0..n_e)
            .map(|_| std::array::from_fn(|k| XI_PRIOR_MEAN[k] + 0.1 * XI_PRIOR_SD[k] * n()))
            .collect();
        let z: [f64; N_CORR] = std::array::from_fn(|_| 0.5 * n());
        let (l, _) = cpc_cholesky(&z);
        let pop = PopulationParams::new(
            std::array::from_fn(|k| XI_PRIOR_MEAN[k] + 0.2 * n()),
            std::array::from_fn(|_| (0.3 * n()).exp() * 0.2),
            corr::to_matrix(&l),
        )
        .unwrap();
        MixedEffectsState { xi, pop }
    }

    #[test]
    fn half_t_normalises() {
        let q = integrate(|s| half_t_log_pdf(s, 3.0).exp(), 0.0, 1e4, 1e-12, 1e-12).unwrap();
        assert_relative_eq!(q.value, 1.0, epsilon = 1e-6);
        let t = statrs::distribution::StudentsT::new(0.0, 1.0, 3.0).unwrap();
        use statrs::distribution::Continuous;
        assert_relative_eq!(half_t_log_pdf(0.7, 3.0), (2.0 * t.pdf(0.7)).ln(), max_relative = 1e-12);
        assert_eq!(half_t_log_pdf(-0.1, 3.0), f64::NEG_INFINITY);
    }

    #[test]
    fn prior_at_mean_is_sum_of_normal_peaks() {
        let pop = PopulationParams::new(XI_PRIOR_MEAN, [1.0; 4], Matrix4::identity()).unwrap();
        let normal: f64 = XI_PRIOR_SD.iter().map(|s| -(s * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
        let half_t = 4.0 * half_t_log_pdf(1.0, 3.0);
        assert_relative_eq!(population_log_prior(&pop), normal + half_t, max_relative = 1e-14);
        let mut zero = pop.clone();
        zero.scales[2] = 0.0;
        assert_eq!(population_log_prior(&zero), f64::NEG_INFINITY);
    }

    #[test]
    fn covariance_is_symmetric_positive_definite() {
        for seed in 0..20 {
            let s = state(2, seed);
            let c = s.pop.covariance();
            assert!((c - c.transpose()).abs().max() < 1e-12);
            assert!(c.cholesky().is_some());
        }
    }

    /// Five-point central differences; the closed-form stress carries
    /// round-off near `1e-10` relative, which swamps steps much below `1e-4`.
    fn five_point_gradient(t: &MixedTarget, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let h = 1e-4 * x[i].abs().max(1.0);
                let f = |k: f64| {
                    let mut y = x.to_vec();
                    y[i] += k * h;
                    t.log_density(&y)
                };
                (f(-2.0) - 8.0 * f(-1.0) + 8.0 * f(1.0) - f(2.0)) / (12.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for param in [Parameterization::Centered, Parameterization::NonCentered] {
            let t = MixedTarget::new(data(3), param).unwrap();
            for seed in 0..20 {
                let x = t.unconstrain(&state(3, seed)).unwrap();
                let mut g = vec![0.0; x.len()];
                t.log_density_grad(&x, &mut g);
                let fd = five_point_gradient(&t, &x);
                for (a, n) in g.iter().zip(&fd) {
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                    assert!(rel < 1e-5, "{param:?} seed {seed}: {a} vs {n}");
                }
            }
        }
    }

    #[test]
    fn unconstrained_density_adds_hyper_jacobian() {
        let d = data(3);
        for param in [Parameterization::Centered, Parameterization::NonCentered] {
            let t = MixedTarget::new(d.clone(), param).unwrap();
            for seed in 0..5 {
                let s = state(3, seed);
                let x = t.unconstrain(&s).unwrap();
                let o = 12;
                let (_, cpc_jac) = cpc_cholesky(&x[o + 8..]);
                let log_s: f64 = x[o + 4..o + 8].iter().sum();
                let mut expected = mixed_log_posterior(&s, &d).unwrap() + log_s + cpc_jac;
                if param == Parameterization::NonCentered {
                    let m = s.pop.cov_cholesky();
                    expected += 3.0 * (0..4).map(|k| m[(k, k)].ln()).sum::<f64>();
                }
                assert_relative_eq!(t.log_density(&x), expected, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn untransformed_density_differs_by_transform_jacobian() {
        let d = data(3);
        for seed in 0..10 {
            let s = state(3, seed);
            let thetas: Vec<ModelParams> = s.xi.iter().map(|x| from_unconstrained(&UnconstrainedParams::from_slice(x))).collect();
            let jac: f64 = s.xi.iter().map(|x| log_abs_det_jacobian(&UnconstrainedParams::from_slice(x))).sum();
            let lhs = mixed_log_posterior(&s, &d).unwrap();
            let rhs = untransformed_log_posterior(&thetas, &s.pop, &d).unwrap() + jac;
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} {rhs}");
        }
    }

    #[test]
    fn permuting_experiments_leaves_density_unchanged() {
        let d = data(4);
        let s = state(4, 3);
        let mut dp = d.clone();
        dp.experiments.reverse();
        let mut sp = s.clone();
        sp.xi.reverse();
        let a = mixed_log_posterior(&s, &d).unwrap();
        let b = mixed_log_posterior(&sp, &dp).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn doubling_a_weight_subtracts_its_penalty() {
        let d = data(2);
        let s = state(2, 1);
        let mut d2 = d.clone();
        let g = d2.experiments[1].gamma[7];
        d2.experiments[1].gamma[7] = 2.0 * g;
        let p = from_unconstrained(&UnconstrainedParams::from_slice(&s.xi[1]));
        let r = d.experiments[1].stress[7] - crate::constitutive::engineering_stress(d.experiments[1].stretch[7], &p).unwrap();
        let delta = mixed_log_posterior(&s, &d2).unwrap() - mixed_log_posterior(&s, &d).unwrap();
        assert_relative_eq!(delta, -r * r / (2.0 * 0.16) * g, max_relative = 1e-8);
    }

    #[test]
    fn unit_weights_give_gaussian_likelihood() {
        let mut d = data(1);
        d.experiments[0].gamma.iter_mut().for_each(|g| *g = 1.0);
        let xi = [1.0, 6.8, -3.8, -3.6];
        let p = from_unconstrained(&UnconstrainedParams::from_slice(&xi));
        let e = &d.experiments[0];
        let plain: f64 = e
            .stretch
            .iter()
            .zip(&e.stress)
            .map(|(&l, &y)| normal_log_pdf(y, crate::constitutive::engineering_stress(l, &p).unwrap(), 0.4))
            .sum();
        assert_relative_eq!(e.log_likelihood(&xi, 0.4, None), plain, max_relative = 1e-12);
    }

    #[test]
    fn state_roundtrip() {
        for param in [Parameterization::Centered, Parameterization::NonCentered] {
            let t = MixedTarget::new(data(2), param).unwrap();
            let s = state(2, 5);
            let back = t.state(&t.unconstrain(&s).unwrap());
            for (a, b) in back.xi.iter().flatten().zip(s.xi.iter().flatten()) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
            assert!((back.pop.corr_chol - s.pop.corr_chol).abs().max() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut d = data(1);
        d.experiments.clear();
        assert!(MixedTarget::new(d, Parameterization::Centered).is_err());
        let s = state(2, 0);
        assert!(mixed_log_posterior(&s, &data(3)).is_err());
        let pop = Population::new(
            vec![Experiment::new("e", TendonType::Sdft, vec![1.0, 1.01], vec![0.0, 0.1]).unwrap()],
            0.4,
        )
        .unwrap();
        assert!(MixedData::from_population(&pop).is_ok());
    }


}
