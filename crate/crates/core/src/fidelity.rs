//! Stage one: per-observation fidelity inference and data selection.
//!
//! Each observation `j` carries a fidelity `γ_j ∈ (0, 1)` that tempers its
//! Gaussian likelihood, `γ_j^{1/2} exp(−γ_j r_j² / 2σ²)`. The logits
//! `χ = logit(γ)` get a multivariate normal prior whose mean and scale are
//! sigmoids in stretch and whose correlation is a squared-exponential kernel,
//! so fidelity is high at low strain and free to drop once damage starts.
//!
//! Sampling alternates a model-parameter block and a fidelity block. The
//! fidelity block lives in whitened coordinates `w` with `χ = μ_γ + L w`,
//! `L L^T = Σ_γ`, so an isotropic random walk in `w` is a random walk in `χ`
//! with covariance proportional to `Σ_γ`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constitutive::{from_unconstrained, stress_unchecked, UnconstrainedParams};
use crate::dataio::{clip_to_max_stress, Experiment, DEFAULT_FIDELITY_THRESHOLD};
use crate::error::{Error, Result};
use crate::samplers::diagnostics::{report, DiagnosticsReport};
use crate::samplers::{derive_seed, rwm_gibbs, Chain, GibbsBlock, GibbsBlockSpec, LogDensity, RwmConfig};
use crate::stats::{log_logistic, logistic, normal_log_pdf, LN_SQRT_2PI};

/// Means of the normal prior on `ξ = [ν, η, τ, ρ]`.
pub const XI_PRIOR_MEAN: [f64; 4] = [1.05309738, 6.83672018, -3.80045123, -3.59771868];
/// Standard deviations of the normal prior on `ξ`.
pub const XI_PRIOR_SD: [f64; 4] = [1.30927056, 0.47191773, 0.64387023, 0.7310165];

/// Sigmoid mean and scale of the logit-fidelity prior plus its kernel length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityPriorSpec {
    pub a_mu: f64,
    pub k_mu: f64,
    pub a_sigma: f64,
    pub k_sigma: f64,
    pub b_rate: f64,
    pub lambda_0: f64,
    pub lengthscale: f64,
}

impl Default for FidelityPriorSpec {
    fn default() -> Self {
        FidelityPriorSpec {
            a_mu: 4.0,
            k_mu: 1.0,
            a_sigma: 0.25,
            k_sigma: 1.0,
            b_rate: 50.0,
            lambda_0: 1.1,
            lengthscale: 0.05,
        }
    }
}

impl FidelityPriorSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.a_mu,
            self.k_mu,
            self.a_sigma,
            self.k_sigma,
            self.b_rate,
            self.lambda_0,
            self.lengthscale,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("fidelity prior has non-finite entries".into()));
        }
        if self.lengthscale <= 0.0 || self.a_sigma <= 0.0 || self.k_sigma <= 0.0 {
            return Err(Error::Config(
                "fidelity prior needs positive lengthscale and scale asymptotes".into(),
            ));
        }
        Ok(())
    }

    fn sigmoid(&self, lambda: f64, left: f64, right: f64) -> f64 {
        left + (right - left) * logistic(self.b_rate * (lambda - self.lambda_0))
    }
}

/// `μ_γ(λ) = A_μ + (K_μ − A_μ) / (1 + exp(−B(λ − λ₀)))`.
pub fn prior_mean(lambda: f64, spec: &FidelityPriorSpec) -> f64 {
    spec.sigmoid(lambda, spec.a_mu, spec.k_mu)
}

/// `σ_γ(λ)`, the same sigmoid between `A_σ` and `K_σ`.
pub fn prior_sd(lambda: f64, spec: &FidelityPriorSpec) -> f64 {
    spec.sigmoid(lambda, spec.a_sigma, spec.k_sigma)
}

/// `Σ[j, j′] = σ(λ_j) σ(λ_j′) exp(−(λ_j − λ_j′)² / 2l²)`, without jitter.
pub fn prior_covariance(stretches: &[f64], spec: &FidelityPriorSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if stretches.is_empty() {
        return Err(Error::domain("fidelity prior needs at least one stretch"));
    }
    if let Some(l) = stretches.iter().find(|l| !l.is_finite()) {
        return Err(Error::domain(format!("non-finite stretch {l}")));
    }
    let n = stretches.len();
    let sd: Vec<f64> = stretches.iter().map(|&l| prior_sd(l, spec)).collect();
    let two_l2 = 2.0 * spec.lengthscale * spec.lengthscale;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let d = stretches[i] - stretches[j];
        sd[i] * sd[j] * (-d * d / two_l2).exp()
    }))
}

/// Lower Cholesky factor of `Σ_γ + 10⁻¹⁰ max(diag Σ_γ) I`.
pub fn prior_cholesky(stretches: &[f64], spec: &FidelityPriorSpec) -> Result<DMatrix<f64>> {
    let mut cov = prior_covariance(stretches, spec)?;
    let jitter = 1e-10 * cov.diagonal().max();
    for i in 0..cov.nrows() {
        cov[(i, i)] += jitter;
    }
    cov.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::domain("fidelity prior covariance is not factorisable"))
}

/// Draws `n` fidelity fields from the prior at the given stretches.
pub fn sample_prior_fidelity(
    stretches: &[f64],
    spec: &FidelityPriorSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let l = prior_cholesky(stretches, spec)?;
    let mu = DVector::from_iterator(stretches.len(), stretches.iter().map(|&s| prior_mean(s, spec)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let z = DVector::from_fn(stretches.len(), |_, _| StandardNormal.sample(&mut rng));
            (&mu + &l * z).iter().map(|&c| logistic(c)).collect()
        })
        .collect())
}

/// Logit fidelities `χ`; `γ = logistic(χ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityField {
    pub chi: Vec<f64>,
}

impl FidelityField {
    pub fn new(chi: Vec<f64>) -> Self {
        FidelityField { chi }
    }

    pub fn from_gamma(gamma: &[f64]) -> Result<Self> {
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(Error::domain(format!("fidelity {g} outside (0, 1)")));
        }
        Ok(FidelityField {
            chi: gamma.iter().map(|&g| crate::stats::logit(g)).collect(),
        })
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.chi.iter().map(|&c| logistic(c)).collect()
    }

    pub fn len(&self) -> usize {
        self.chi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chi.is_empty()
    }
}

/// Normal prior on `ξ` used in stage one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiPrior {
    pub mean: [f64; 4],
    pub sd: [f64; 4],
}

impl Default for XiPrior {
    fn default() -> Self {
        XiPrior {
            mean: XI_PRIOR_MEAN,
            sd: XI_PRIOR_SD,
        }
    }
}

impl XiPrior {
    pub fn log_density(&self, xi: &[f64]) -> f64 {
        (0..4).map(|k| normal_log_pdf(xi[k], self.mean[k], self.sd[k])).sum()
    }
}

/// `Σ_j [½ ln γ_j − γ_j r_j² / 2σ²]`; `−∞` if the model is not finite.
fn tempered_log_likelihood(xi: &UnconstrainedParams, stretch: &[f64], stress: &[f64], chi: &[f64], sigma: f64) -> f64 {
    let params = from_unconstrained(xi);
    let inv_two_var = 0.5 / (sigma * sigma);
    let mut sum = 0.0;
    for j in 0..stretch.len() {
        let m = stress_unchecked(stretch[j], &params);
        let r = stress[j] - m;
        sum += 0.5 * log_logistic(chi[j]) - logistic(chi[j]) * r * r * inv_two_var;
    }
    if sum.is_finite() {
        sum
    } else {
        f64::NEG_INFINITY
    }
}

/// Log posterior of the selection model at `(ξ, χ)`, up to a constant:
/// `log N(ξ; prior) + log N(χ; μ_γ, Σ_γ) + Σ_j [½ ln γ_j − γ_j r_j²/2σ²]`.
///
/// This evaluates the formula directly; samplers use [`SelectionTarget`].
pub fn selection_log_posterior(
    xi: &UnconstrainedParams,
    chi: &FidelityField,
    exp: &Experiment,
    sigma_obs: f64,
    spec: &FidelityPriorSpec,
) -> Result<f64> {
    selection_log_posterior_with(xi, chi, exp, sigma_obs, spec, &XiPrior::default())
}

pub fn selection_log_posterior_with(
    xi: &UnconstrainedParams,
    chi: &FidelityField,
    exp: &Experiment,
    sigma_obs: f64,
    spec: &FidelityPriorSpec,
    xi_prior: &XiPrior,
) -> Result<f64> {
    if exp.is_empty() {
        return Err(Error::Data("selection needs at least one observation".into()));
    }
    if chi.len() != exp.len() {
        return Err(Error::Data(format!(
            "{} fidelities for {} observations",
            chi.len(),
            exp.len()
        )));
    }
    if !(sigma_obs.is_finite() && sigma_obs > 0.0) {
        return Err(Error::Config(format!("σ_obs must be positive, got {sigma_obs}")));
    }
    let l = prior_cholesky(exp.stretch(), spec)?;
    let diff = DVector::from_iterator(
        exp.len(),
        exp.stretch().iter().zip(&chi.chi).map(|(&s, &c)| c - prior_mean(s, spec)),
    );
    let z = l
        .solve_lower_triangular(&diff)
        .ok_or_else(|| Error::domain("singular fidelity prior factor"))?;
    let log_det: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
    let chi_prior = -0.5 * z.norm_squared() - log_det - exp.len() as f64 * LN_SQRT_2PI;
    let lik = tempered_log_likelihood(xi, exp.stretch(), exp.stress(), &chi.chi, sigma_obs);
    Ok(xi_prior.log_density(&xi.to_array()) + chi_prior + lik)
}

/// Selection posterior over `x = [ξ, w]` with `χ = μ_γ + L w`.
pub struct SelectionTarget {
    stretch: Vec<f64>,
    stress: Vec<f64>,
    sigma_obs: f64,
    mu: DVector<f64>,
    chol: DMatrix<f64>,
    xi_prior: XiPrior,
}

impl SelectionTarget {
    pub fn new(exp: &Experiment, sigma_obs: f64, spec: &FidelityPriorSpec, xi_prior: XiPrior) -> Result<Self> {
        if exp.is_empty() {
            return Err(Error::Data("selection needs at least one observation".into()));
        }
        if !(sigma_obs.is_finite() && sigma_obs > 0.0) {
            return Err(Error::Config(format!("σ_obs must be positive, got {sigma_obs}")));
        }
        Ok(SelectionTarget {
            stretch: exp.stretch().to_vec(),
            stress: exp.stress().to_vec(),
            sigma_obs,
            mu: DVector::from_iterator(exp.len(), exp.stretch().iter().map(|&s| prior_mean(s, spec))),
            chol: prior_cholesky(exp.stretch(), spec)?,
            xi_prior,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.stretch.len()
    }

    /// `χ = μ_γ + L w`.
    pub fn chi(&self, w: &[f64]) -> Vec<f64> {
        let w = DVector::from_column_slice(w);
        (&self.mu + &self.chol * w).iter().copied().collect()
    }

    /// Whitened coordinates of a logit field.
    pub fn whiten(&self, chi: &[f64]) -> Result<Vec<f64>> {
        let d = DVector::from_column_slice(chi) - &self.mu;
        self.chol
            .solve_lower_triangular(&d)
            .map(|v| v.iter().copied().collect())
            .ok_or_else(|| Error::domain("singular fidelity prior factor"))
    }
}

impl LogDensity for SelectionTarget {
    fn dim(&self) -> usize {
        4 + self.stretch.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let (xi, w) = x.split_at(4);
        let chi = self.chi(w);
        let prior_w = -0.5 * w.iter().map(|v| v * v).sum::<f64>();
        let xi = UnconstrainedParams::from_slice(xi);
        self.xi_prior.log_density(&xi.to_array())
            + prior_w
            + tempered_log_likelihood(&xi, &self.stretch, &self.stress, &chi, self.sigma_obs)
    }
}

/// Stage-one run settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub prior: FidelityPriorSpec,
    pub xi_prior: XiPrior,
    pub sigma_obs: f64,
    pub chains: usize,
    pub burn_in: usize,
    pub iterations: usize,
    /// Upper bound on retained draws per chain; sets the thinning interval.
    pub max_draws_per_chain: usize,
    pub seed: u64,
    pub threshold: f64,
    pub rhat_threshold: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            prior: FidelityPriorSpec::default(),
            xi_prior: XiPrior::default(),
            sigma_obs: crate::dataio::NoiseConvention::default().sigma_obs(),
            chains: 3,
            burn_in: 10_000,
            iterations: 50_000,
            max_draws_per_chain: 5_000,
            seed: 0,
            threshold: DEFAULT_FIDELITY_THRESHOLD,
            rhat_threshold: 1.05,
        }
    }
}

impl SelectionConfig {
    /// Chain lengths of the original study: 2.5·10⁶ burn-in, 5·10⁶ samples.
    pub fn paper_scale(mut self) -> Self {
        self.burn_in = 2_500_000;
        self.iterations = 5_000_000;
        self
    }

    fn thin(&self) -> usize {
        self.iterations.div_ceil(self.max_draws_per_chain.max(1)).max(1)
    }
}

/// Stage-one output for one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub id: String,
    /// Stretches of the clipped experiment the fidelities refer to.
    pub stretch: Vec<f64>,
    /// Posterior mean of `γ_j`.
    pub fidelity_mean: Vec<f64>,
    /// Posterior mean of `ξ`.
    pub xi_mean: [f64; 4],
    /// Posterior mean of `b`.
    pub b_mean: f64,
    /// Index of the first observation with mean fidelity below the threshold.
    pub truncation_index: Option<usize>,
    pub diagnostics: DiagnosticsReport,
    pub converged: bool,
    #[serde(skip)]
    pub chains: Vec<Chain>,
}

impl FidelitySummary {
    /// Stretch at which the data is cut, if any.
    pub fn truncation_stretch(&self) -> Option<f64> {
        self.truncation_index.map(|i| self.stretch[i])
    }

    /// Column names of the sampled state.
    pub fn column_names(&self) -> Vec<String> {
        column_names(self.stretch.len())
    }
}

pub fn column_names(n_obs: usize) -> Vec<String> {
    UnconstrainedParams::NAMES
        .iter()
        .map(|s| s.to_string())
        .chain((0..n_obs).map(|j| format!("w{j}")))
        .collect()
}

/// Runs the selection sampler on the experiment clipped to its stress maximum.
pub fn run_selection(exp: &Experiment, config: &SelectionConfig) -> Result<FidelitySummary> {
    if exp.is_empty() {
        return Err(Error::Data("selection needs at least one observation".into()));
    }
    config.prior.validate()?;
    let exp = clip_to_max_stress(exp);
    let target = SelectionTarget::new(&exp, config.sigma_obs, &config.prior, config.xi_prior)?;
    let n = exp.len();

    let shape = DMatrix::from_diagonal(&DVector::from_column_slice(&config.xi_prior.sd));
    let spec = GibbsBlockSpec::new(vec![
        GibbsBlock::new(vec![0, 1, 2, 3], 0.05).with_shape(shape).adaptive(),
        GibbsBlock::new((4..4 + n).collect(), 2.38 / (n as f64).sqrt()),
    ]);
    let rwm = RwmConfig {
        chains: config.chains,
        burn_in: config.burn_in,
        iterations: config.iterations,
        thin: config.thin(),
        seed: config.seed,
        target_accept: 0.234,
    };
    let inits = initial_states(&target, &exp, config)?;
    let chains = rwm_gibbs(&target, &spec, &rwm, &inits)?;
    summarise(&exp, &target, chains, config)
}

/// Random starts: `ξ` jittered around a least-squares fit, `w` from the prior.
fn initial_states(target: &SelectionTarget, exp: &Experiment, config: &SelectionConfig) -> Result<Vec<Vec<f64>>> {
    let centre = least_squares_start(exp, &config.xi_prior);
    let n = target.n_obs();
    let mut out = Vec::with_capacity(config.chains);
    for k in 0..config.chains {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed ^ 0x5EED, k as u64));
        let mut x = Vec::with_capacity(4 + n);
        for (c, sd) in centre.iter().zip(&config.xi_prior.sd) {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.push(c + 0.05 * sd * z);
        }
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.push(z);
        }
        if !target.log_density(&x).is_finite() {
            return Err(Error::Sampler(format!("chain {k}: non-finite initial selection density")));
        }
        out.push(x);
    }
    Ok(out)
}

/// Coordinate-wise pattern search for the `ξ` minimising the unweighted
/// squared residuals plus the prior penalty.
pub(crate) fn least_squares_start(exp: &Experiment, prior: &XiPrior) -> [f64; 4] {
    let objective = |xi: &[f64; 4]| {
        let p = from_unconstrained(&UnconstrainedParams::from_slice(xi));
        let ss: f64 = exp
            .stretch()
            .iter()
            .zip(exp.stress())
            .map(|(&l, &y)| (y - stress_unchecked(l, &p)).powi(2))
            .sum();
        let pen: f64 = (0..4).map(|k| ((xi[k] - prior.mean[k]) / prior.sd[k]).powi(2)).sum();
        let v = ss + pen;
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut x = prior.mean;
    let mut best = objective(&x);
    let mut step = prior.sd;
    for _ in 0..200 {
        let mut improved = false;
        for k in 0..4 {
            for dir in [1.0, -1.0] {
                let mut y = x;
                y[k] += dir * step[k];
                let f = objective(&y);
                if f < best {
                    best = f;
                    x = y;
                    improved = true;
                }
            }
        }
        if !improved {
            step.iter_mut().for_each(|s| *s *= 0.5);
            if step.iter().zip(&prior.sd).all(|(s, sd)| *s < 1e-6 * sd) {
                break;
            }
        }
    }
    x
}

fn summarise(exp: &Experiment, target: &SelectionTarget, chains: Vec<Chain>, config: &SelectionConfig) -> Result<FidelitySummary> {
    let n = exp.len();
    let mut gamma_sum = vec![0.0; n];
    let mut xi_sum = [0.0; 4];
    let mut b_sum = 0.0;
    let mut count = 0usize;
    for c in &chains {
        for draw in &c.draws {
            let chi = target.chi(&draw[4..]);
            for (s, x) in gamma_sum.iter_mut().zip(&chi) {
                *s += logistic(*x);
            }
            for k in 0..4 {
                xi_sum[k] += draw[k];
            }
            b_sum += from_unconstrained(&UnconstrainedParams::from_slice(&draw[..4])).b;
            count += 1;
        }
    }
    let count_f = count.max(1) as f64;
    let fidelity_mean: Vec<f64> = gamma_sum.iter().map(|s| s / count_f).collect();
    let diagnostics = report(&chains, &column_names(n))?;
    let converged = diagnostics.converged(config.rhat_threshold);
    let truncation_index = fidelity_mean.iter().position(|&m| m < config.threshold);
    Ok(FidelitySummary {
        id: exp.id().to_string(),
        stretch: exp.stretch().to_vec(),
        fidelity_mean,
        xi_mean: xi_sum.map(|v| v / count_f),
        b_mean: b_sum / count_f,
        truncation_index,
        diagnostics,
        converged,
        chains,
    })
}

/// Noise scale from low-strain data.
///
/// Below `max_strain` the fibrils are taken as slack, so the model is
/// `y = (1−φ)μ (λ − λ⁻²)`; the modulus is fitted by least squares without
/// intercept and the residual standard deviation is pooled over experiments.
pub fn estimate_sigma(experiments: &[Experiment], max_strain: f64) -> Result<f64> {
    let mut ssr = 0.0;
    let mut dof = 0usize;
    for e in experiments {
        let pts: Vec<(f64, f64)> = e
            .stretch()
            .iter()
            .zip(e.stress())
            .filter(|(l, _)| **l - 1.0 <= max_strain)
            .map(|(&l, &y)| (l - 1.0 / (l * l), y))
            .collect();
        if pts.len() < 2 {
            continue;
        }
        let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
        let sxy: f64 = pts.iter().map(|(x, y)| x * y).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        ssr += pts.iter().map(|(x, y)| (y - slope * x).powi(2)).sum::<f64>();
        dof += pts.len() - 1;
    }
    if dof == 0 {
        return Err(Error::Data(format!(
            "no experiment has two or more observations below strain {max_strain}"
        )));
    }
    Ok((ssr / dof as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::dataio::TendonType;

    #[test]
    fn sigmoid_values() {
        let s = FidelityPriorSpec::default();
        assert_relative_eq!(prior_mean(1.1, &s), 2.5, max_relative = 1e-15);
        assert_relative_eq!(prior_mean(1.0, &s), 4.0 - 3.0 / (1.0 + 5f64.exp()), max_relative = 1e-15);
        assert_relative_eq!(prior_mean(1.0, &s), 3.97993, max_relative = 1e-5);
        assert_relative_eq!(prior_mean(100.0, &s), 1.0, max_relative = 1e-15);
        assert_relative_eq!(prior_sd(1.1, &s), 0.625, max_relative = 1e-15);
        assert_relative_eq!(prior_sd(1.0, &s), 0.25 + 0.75 / (1.0 + 5f64.exp()), max_relative = 1e-15);
        assert_relative_eq!(prior_sd(1.0, &s), 0.255017, max_relative = 1e-4);
        assert_relative_eq!(prior_sd(100.0, &s), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn covariance_entries() {
        let s = FidelityPriorSpec::default();
        let c = prior_covariance(&[1.0, 1.1, 3.0], &s).unwrap();
        assert_relative_eq!(c[(0, 0)], prior_sd(1.0, &s).powi(2), max_relative = 1e-15);
        let exact = prior_sd(1.0, &s) * 0.625 * (-2f64).exp();
        assert_relative_eq!(c[(0, 1)], exact, max_relative = 1e-14);
        // The tabulated reference is rounded in its last digit.
        assert_relative_eq!(c[(0, 1)], 0.021573, max_relative = 2e-4);
        assert_eq!(c[(0, 1)], c[(1, 0)]);
        assert!(c[(0, 2)] < 1e-300);
        assert!(prior_covariance(&[1.0, f64::NAN], &s).is_err());
    }

    #[test]
    fn fine_grids_factorise() {
        let s = FidelityPriorSpec::default();
        let grid: Vec<f64> = (0..2000).map(|i| 1.0 + 0.15 * i as f64 / 1999.0).collect();
        assert!(prior_cholesky(&grid, &s).is_ok());
    }

    fn small_experiment() -> Experiment {
        Experiment::new("t", TendonType::Sdft, vec![1.0, 1.02, 1.04, 1.06], vec![0.0, 1.0, 5.0, 12.0]).unwrap()
    }

    #[test]
    fn single_observation_term() {
        let xi = UnconstrainedParams::new(1.0, 6.8, -3.8, -3.6);
        let sigma = 0.4;
        let r = 3.0 - crate::constitutive::engineering_stress(1.05, &from_unconstrained(&xi)).unwrap();
        let term = tempered_log_likelihood(&xi, &[1.05], &[3.0], &[0.0], sigma);
        assert_relative_eq!(term, 0.5 * 0.5f64.ln() - 0.25 * r * r / (sigma * sigma), max_relative = 1e-14);
    }

    #[test]
    fn direct_density_assembles_its_terms() {
        let exp = small_experiment();
        let spec = FidelityPriorSpec::default();
        let xi = UnconstrainedParams::new(1.0, 6.8, -3.8, -3.6);
        let chi = FidelityField::new(vec![3.0, 2.0, 0.0, -1.0]);
        let lp = selection_log_posterior(&xi, &chi, &exp, 0.4, &spec).unwrap();
        let mut cov = prior_covariance(exp.stretch(), &spec).unwrap();
        let jitter = 1e-10 * cov.diagonal().max();
        for i in 0..4 {
            cov[(i, i)] += jitter;
        }
        let mu = DVector::from_iterator(4, exp.stretch().iter().map(|&l| prior_mean(l, &spec)));
        let d = DVector::from_column_slice(&chi.chi) - mu;
        let quad = (d.transpose() * cov.clone().try_inverse().unwrap() * &d)[(0, 0)];
        let chi_prior = -0.5 * quad - 0.5 * cov.determinant().ln() - 4.0 * LN_SQRT_2PI;
        let expected = XiPrior::default().log_density(&xi.to_array())
            + chi_prior
            + tempered_log_likelihood(&xi, exp.stretch(), exp.stress(), &chi.chi, 0.4);
        assert_relative_eq!(lp, expected, max_relative = 1e-9);
    }

    #[test]
    fn whitened_target_matches_direct_density_up_to_constant() {
        let exp = small_experiment();
        let spec = FidelityPriorSpec::default();
        let t = SelectionTarget::new(&exp, 0.4, &spec, XiPrior::default()).unwrap();
        let states = [
            ([1.0, 6.8, -3.8, -3.6], [3.0, 2.0, 1.0, -1.0]),
            ([0.5, 7.0, -3.5, -3.9], [0.1, -2.0, 4.0, 0.3]),
        ];
        let mut diffs = Vec::new();
        for (xi, chi) in states {
            let w = t.whiten(&chi).unwrap();
            let mut x = xi.to_vec();
            x.extend(w);
            let direct = selection_log_posterior(
                &UnconstrainedParams::from_slice(&xi),
                &FidelityField::new(chi.to_vec()),
                &exp,
                0.4,
                &spec,
            )
            .unwrap();
            diffs.push(t.log_density(&x) - direct);
        }
        assert_relative_eq!(diffs[0], diffs[1], epsilon = 1e-9);
    }

    #[test]
    fn vanishing_fidelity_tunes_data_out() {
        let exp = small_experiment();
        let spec = FidelityPriorSpec::default();
        let xi = UnconstrainedParams::new(1.0, 6.8, -3.8, -3.6);
        let tiny = FidelityField::new(vec![-700.0; 4]);
        let lp = selection_log_posterior(&xi, &tiny, &exp, 0.4, &spec).unwrap();
        assert!(lp < -1e3);
    }

    #[test]
    fn full_fidelity_reduces_to_gaussian_likelihood() {
        let exp = small_experiment();
        let spec = FidelityPriorSpec::default();
        let one = FidelityField::new(vec![40.0; 4]);
        let sigma = 0.4;
        let mut diffs = Vec::new();
        for xi in [UnconstrainedParams::new(1.0, 6.8, -3.8, -3.6), UnconstrainedParams::new(0.2, 7.1, -3.5, -3.0)] {
            let lp = selection_log_posterior(&xi, &one, &exp, sigma, &spec).unwrap();
            let p = from_unconstrained(&xi);
            let plain: f64 = exp
                .stretch()
                .iter()
                .zip(exp.stress())
                .map(|(&l, &y)| normal_log_pdf(y, crate::constitutive::engineering_stress(l, &p).unwrap(), sigma))
                .sum::<f64>()
                + XiPrior::default().log_density(&xi.to_array());
            diffs.push(lp - plain);
        }
        assert_relative_eq!(diffs[0], diffs[1], epsilon = 1e-8);
    }

    #[test]
    fn higher_fidelity_penalises_residual_more() {
        let xi = UnconstrainedParams::new(1.0, 6.8, -3.8, -3.6);
        let like = |g: f64| tempered_log_likelihood(&xi, &[1.05], &[30.0], &[crate::stats::logit(g)], 0.4) - 0.5 * g.ln();
        assert!(like(0.2) > like(0.5) && like(0.5) > like(0.9));
    }

    #[test]
    fn prior_median_at_midpoint() {
        let spec = FidelityPriorSpec::default();
        let draws = sample_prior_fidelity(&[1.0, 1.1], &spec, 20_000, 1).unwrap();
        let g: Vec<f64> = draws.iter().map(|d| d[1]).collect();
        let med = crate::stats::quantile(&g, 0.5);
        assert!((med - logistic(2.5)).abs() < 0.01, "{med}");
    }

    #[test]
    fn sigma_estimate_recovers_noise() {
        let p = crate::constitutive::ModelParams::new(3.0, 900.0, 1.03, 1.06).unwrap();
        let exps: Vec<Experiment> = (0..10)
            .map(|i| {
                let spec = crate::synth::SyntheticSpec::new(p, crate::synth::uniform_stretch_grid(0.02, 41), 0.3, i);
                crate::synth::generate_experiment(&spec).unwrap()
            })
            .collect();
        let s = estimate_sigma(&exps, 0.02).unwrap();
        assert!((s - 0.3).abs() < 0.03, "{s}");
    }
}
