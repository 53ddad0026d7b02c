//! Synthetic experiments and an independent quadrature oracle for the fibril
//! stress.

use nalgebra::{DMatrix, Matrix4, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constitutive::{engineering_stress, from_unconstrained, ModelParams, UnconstrainedParams};
use crate::dataio::{Experiment, Population, TendonType};
use crate::error::{Error, Result};
use crate::samplers::derive_seed;

/// A quadrature value with its estimated absolute error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
}

// 15-point Kronrod nodes on [-1, 1] (non-negative half) and weights; the
// odd-indexed nodes are the 7-point Gauss nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gauss_kronrod<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> Quadrature {
    let centre = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let fc = f(centre);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(centre - dx) + f(centre + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Quadrature {
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Adaptive Gauss–Kronrod (7, 15) integration of `f` over `[lo, hi]`.
///
/// Intervals are bisected until each local error estimate is below its share
/// of `max(abs_tol, rel_tol |I|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, abs_tol: f64, rel_tol: f64) -> Result<Quadrature> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::domain("integration limits must be finite"));
    }
    if hi <= lo {
        return Ok(Quadrature { value: 0.0, error: 0.0 });
    }
    const MAX_INTERVALS: usize = 10_000;
    let mut pending = vec![(lo, hi, gauss_kronrod(&f, lo, hi))];
    let mut accepted = Quadrature { value: 0.0, error: 0.0 };
    let mut evaluated = 1;
    let width = hi - lo;
    while let Some((l, h, q)) = pending.pop() {
        if !q.value.is_finite() {
            return Err(Error::domain(format!("non-finite integrand on [{l}, {h}]")));
        }
        let total: f64 = accepted.value + q.value + pending.iter().map(|p| p.2.value).sum::<f64>();
        let tol = abs_tol.max(rel_tol * total.abs()) * (h - l) / width;
        if q.error <= tol || h - l < 1e-14 * width.max(1.0) {
            accepted.value += q.value;
            accepted.error += q.error;
            continue;
        }
        evaluated += 2;
        if evaluated > MAX_INTERVALS {
            return Err(Error::domain("quadrature did not converge"));
        }
        let m = 0.5 * (l + h);
        pending.push((l, m, gauss_kronrod(&f, l, m)));
        pending.push((m, h, gauss_kronrod(&f, m, h)));
    }
    Ok(accepted)
}

/// Fibril stress `φE ∫ (1/x − 1/λ) p(x) dx` over recruited critical
/// stretches `x ∈ [a, min(λ, b)]`, integrated numerically with absolute
/// tolerance `abs_tol`.
pub fn quadrature_fibril_stress_with_tol(lambda: f64, params: &ModelParams, abs_tol: f64) -> Result<Quadrature> {
    params.validate()?;
    if !(lambda.is_finite() && lambda >= 1.0) {
        return Err(Error::domain(format!("stretch must be ≥ 1, got {lambda}")));
    }
    let (a, b) = (params.a, params.b);
    let c = 0.5 * (a + b);
    let height = 2.0 / (b - a);
    let density = |x: f64| {
        if x < c {
            height * (x - a) / (c - a)
        } else {
            height * (b - x) / (b - c)
        }
    };
    let integrand = |x: f64| (1.0 / x - 1.0 / lambda) * density(x);
    let upper = lambda.min(b);
    if upper <= a {
        return Ok(Quadrature { value: 0.0, error: 0.0 });
    }
    let e = params.fibril_term;
    // Scale the absolute tolerance into integral units.
    let tol = abs_tol / e.max(1.0);
    let mut out = Quadrature { value: 0.0, error: 0.0 };
    for (lo, hi) in [(a, upper.min(c)), (c, upper)] {
        if hi > lo {
            let q = integrate(integrand, lo, hi, 0.5 * tol, 1e-13)?;
            out.value += q.value;
            out.error += q.error;
        }
    }
    Ok(Quadrature {
        value: e * out.value,
        error: e * out.error,
    })
}

/// [`quadrature_fibril_stress_with_tol`] at absolute tolerance `1e-10` MPa.
pub fn quadrature_fibril_stress(lambda: f64, params: &ModelParams) -> Result<Quadrature> {
    quadrature_fibril_stress_with_tol(lambda, params, 1e-10)
}

/// Damage emulation: beyond `onset` the stress gradient is multiplied by
/// `softening`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Damage {
    /// Stretch at which softening starts.
    pub onset: f64,
    /// Factor in `[0, 1)` applied to the stress gradient after onset.
    pub softening: f64,
}

/// Recipe for one synthetic experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub id: String,
    pub tendon_type: TendonType,
    pub params: ModelParams,
    pub stretch: Vec<f64>,
    /// Standard deviation of additive Gaussian noise, MPa.
    pub noise_sd: f64,
    pub damage: Option<Damage>,
    /// Permit damage onset at or below `b`.
    pub allow_early_damage: bool,
    pub seed: u64,
}

/// `n` equally spaced stretches from 1 to `1 + max_strain`.
pub fn uniform_stretch_grid(max_strain: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| 1.0 + max_strain * j as f64 / (n - 1).max(1) as f64)
        .collect()
}

impl SyntheticSpec {
    pub fn new(params: ModelParams, stretch: Vec<f64>, noise_sd: f64, seed: u64) -> Self {
        SyntheticSpec {
            id: "synthetic".into(),
            tendon_type: TendonType::Sdft,
            params,
            stretch,
            noise_sd,
            damage: None,
            allow_early_damage: false,
            seed,
        }
    }

    pub fn with_damage(mut self, onset: f64, softening: f64) -> Self {
        self.damage = Some(Damage { onset, softening });
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::Config(format!("noise sd must be ≥ 0, got {}", self.noise_sd)));
        }
        if let Some(d) = &self.damage {
            if !(0.0..1.0).contains(&d.softening) {
                return Err(Error::Config(format!("softening must lie in [0, 1), got {}", d.softening)));
            }
            if !(d.onset.is_finite() && d.onset >= 1.0) {
                return Err(Error::Config(format!("damage onset must be a stretch ≥ 1, got {}", d.onset)));
            }
            if d.onset <= self.params.b && !self.allow_early_damage {
                return Err(Error::Config(format!(
                    "damage onset {} is not beyond full recruitment b = {}",
                    d.onset, self.params.b
                )));
            }
        }
        Ok(())
    }

    /// Noise-free response including any damage.
    pub fn mean_stress(&self, lambda: f64) -> Result<f64> {
        match self.damage {
            Some(d) if lambda > d.onset => {
                let at_onset = engineering_stress(d.onset, &self.params)?;
                let intact = engineering_stress(lambda, &self.params)?;
                Ok(at_onset + d.softening * (intact - at_onset))
            }
            _ => engineering_stress(lambda, &self.params),
        }
    }
}

/// Generates one experiment from `spec`.
pub fn generate_experiment(spec: &SyntheticSpec) -> Result<Experiment> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let stress = spec
        .stretch
        .iter()
        .map(|&l| Ok(spec.mean_stress(l)? + noise.sample(&mut rng)))
        .collect::<Result<Vec<_>>>()?;
    Experiment::new(spec.id.clone(), spec.tendon_type, spec.stretch.clone(), stress)
}

/// Recipe for a synthetic population: `ξ_i ~ N(μ_pop, Σ_pop)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub tendon_type: TendonType,
    pub mu_pop: [f64; 4],
    /// Row-major 4×4 covariance of the unconstrained parameters.
    pub sigma_pop: [[f64; 4]; 4],
    pub n_experiments: usize,
    pub stretch: Vec<f64>,
    pub noise_sd: f64,
    /// Noise level used to form the population's `σ_obs`.
    pub sigma_obs: f64,
    /// Damage applied to every experiment, as a stretch beyond `b_i`.
    pub damage_offset: Option<Damage>,
    pub seed: u64,
}

/// A generated population with its ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticPopulation {
    pub population: Population,
    pub xi: Vec<UnconstrainedParams>,
    pub params: Vec<ModelParams>,
}

fn population_factor(sigma: &[[f64; 4]; 4]) -> Result<Matrix4<f64>> {
    let m = Matrix4::from_fn(|i, j| sigma[i][j]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("population covariance is not finite".into()));
    }
    if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
        return Err(Error::Config("population covariance is not symmetric".into()));
    }
    if m.iter().all(|v| *v == 0.0) {
        return Ok(Matrix4::zeros());
    }
    // Semi-definite matrices are accepted via their symmetric square root.
    let eig = m.symmetric_eigen();
    let tol = 1e-12 * eig.eigenvalues.abs().max();
    if eig.eigenvalues.iter().any(|&v| v < -tol) {
        return Err(Error::Config("population covariance is not positive semi-definite".into()));
    }
    let root = Matrix4::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(eig.eigenvectors * root)
}

/// Generates `n_experiments` tendons from the population spec.
pub fn generate_population(spec: &PopulationSpec) -> Result<SyntheticPopulation> {
    if spec.n_experiments == 0 {
        return Err(Error::Config("population needs at least one experiment".into()));
    }
    let factor = population_factor(&spec.sigma_pop)?;
    let mu = Vector4::from(spec.mu_pop);
    let mut experiments = Vec::with_capacity(spec.n_experiments);
    let mut xis = Vec::with_capacity(spec.n_experiments);
    let mut params = Vec::with_capacity(spec.n_experiments);
    for i in 0..spec.n_experiments {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
        let z = Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let x = mu + factor * z;
        let xi = UnconstrainedParams::new(x[0], x[1], x[2], x[3]);
        let theta = from_unconstrained(&xi);
        let mut one = SyntheticSpec::new(theta, spec.stretch.clone(), spec.noise_sd, derive_seed(spec.seed, 1_000_000 + i as u64));
        one.id = format!("synthetic-{:02}", i + 1);
        one.tendon_type = spec.tendon_type;
        if let Some(d) = spec.damage_offset {
            one.damage = Some(Damage {
                onset: theta.b + d.onset - 1.0,
                softening: d.softening,
            });
        }
        experiments.push(generate_experiment(&one)?);
        xis.push(xi);
        params.push(theta);
    }
    Ok(SyntheticPopulation {
        population: Population::new(experiments, spec.sigma_obs)?,
        xi: xis,
        params,
    })
}

/// Dense covariance from standard deviations and a correlation matrix.
pub fn covariance_from(sd: [f64; 4], corr: &DMatrix<f64>) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = sd[i] * sd[j] * corr[(i, j)];
        }
    }
    out
}
