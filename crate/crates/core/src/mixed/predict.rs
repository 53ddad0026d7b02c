//! Posterior predictives and the linear-modulus comparison.

use nalgebra::Vector4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::PopulationPosterior;
use crate::constitutive::{from_unconstrained, stress_unchecked, ModelParams, UnconstrainedParams};
use crate::dataio::Experiment;
use crate::error::{Error, Result};
use crate::stats::{kde_mode, mean, quantile, variance, DensityGrid};

/// Predictive parameter draws for a new tendon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveParams {
    pub xi: Vec<[f64; 4]>,
    pub theta: Vec<ModelParams>,
    /// Kernel-density mode of each component of `θ*`.
    pub modes: [f64; 4],
}

impl PredictiveParams {
    /// Draws of component `k` of `θ*`.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.theta.iter().map(|t| t.to_array()[k]).collect()
    }

    /// Density grid of component `k` on `points` points.
    pub fn density(&self, k: usize, points: usize) -> DensityGrid {
        DensityGrid::estimate(&self.component(k), points)
    }
}

/// Indices of `n` draws spread evenly over `total`.
fn spread(total: usize, n: usize) -> Vec<usize> {
    if n >= total {
        return (0..total).collect();
    }
    (0..n).map(|i| i * total / n).collect()
}

/// Draws `ξ* ~ N(μ_pop, Σ_pop)` once per selected posterior draw and maps it
/// to `θ*`; `n_draws` posterior draws are used, evenly spaced.
pub fn posterior_predictive_params(posterior: &PopulationPosterior, n_draws: usize, seed: u64) -> Result<PredictiveParams> {
    let rows: Vec<&Vec<f64>> = posterior.draws().collect();
    if rows.is_empty() || n_draws == 0 {
        return Err(Error::Data("no posterior draws to predict from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xi = Vec::new();
    let mut theta = Vec::new();
    for idx in spread(rows.len(), n_draws) {
        let pop = posterior.population_at(rows[idx])?;
        let z = Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let x: [f64; 4] = (Vector4::from(pop.mu_pop) + pop.cov_cholesky() * z).into();
        theta.push(from_unconstrained(&UnconstrainedParams::from_slice(&x)));
        xi.push(x);
    }
    let modes = std::array::from_fn(|k| kde_mode(&theta.iter().map(|t| t.to_array()[k]).collect::<Vec<_>>()));
    Ok(PredictiveParams { xi, theta, modes })
}

/// Per-stretch median and central 95% band.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StressBands {
    pub stretch: Vec<f64>,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StressBands {
    /// Fraction of `(stretch, stress)` pairs inside the band, matched by index.
    pub fn coverage(&self, stress: &[f64]) -> f64 {
        let inside = stress
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .filter(|&(y, (lo, hi))| lo <= y && y <= hi)
            .count();
        inside as f64 / stress.len().max(1) as f64
    }
}

/// `M(λ, θ_i) + ε`, `ε ~ N(0, σ²)`, over every posterior draw of tendon `i`.
pub fn posterior_predictive_stress(
    posterior: &PopulationPosterior,
    tendon: usize,
    grid: &[f64],
    sigma_obs: f64,
    seed: u64,
) -> Result<StressBands> {
    if tendon >= posterior.n_experiments() {
        return Err(Error::Data(format!(
            "tendon index {tendon} out of range for {} experiments",
            posterior.n_experiments()
        )));
    }
    if let Some(l) = grid.iter().find(|l| !(**l >= 1.0)) {
        return Err(Error::domain(format!("stretch {l} below 1")));
    }
    if !(sigma_obs >= 0.0 && sigma_obs.is_finite()) {
        return Err(Error::Config(format!("σ_obs must be ≥ 0, got {sigma_obs}")));
    }
    let noise = Normal::new(0.0, sigma_obs).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = vec![Vec::with_capacity(posterior.n_draws()); grid.len()];
    for row in posterior.draws() {
        let p = from_unconstrained(&UnconstrainedParams::from_slice(&posterior.xi_at(row, tendon)));
        for (col, &l) in columns.iter_mut().zip(grid) {
            col.push(stress_unchecked(l, &p) + noise.sample(&mut rng));
        }
    }
    Ok(StressBands {
        stretch: grid.to_vec(),
        median: columns.iter().map(|c| quantile(c, 0.5)).collect(),
        lower: columns.iter().map(|c| quantile(c, 0.025)).collect(),
        upper: columns.iter().map(|c| quantile(c, 0.975)).collect(),
    })
}

/// `(μ, σ²)` of the lognormal with mean `m` and variance `v`.
pub fn lognormal_moment_match(m: f64, v: f64) -> Result<(f64, f64)> {
    if !(m > 0.0 && v >= 0.0) {
        return Err(Error::domain(format!("lognormal needs mean > 0 and variance ≥ 0, got {m}, {v}")));
    }
    let s2 = (v / (m * m)).ln_1p();
    Ok((m.ln() - 0.5 * s2, s2))
}

/// Ordinary least-squares slope and intercept.
pub fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSlope {
    pub id: String,
    pub b_mean: f64,
    pub truncation_stretch: f64,
    pub points: usize,
    pub slope: f64,
}

/// Linear-region slopes and their moment-matched lognormal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearModulusComparison {
    pub total: usize,
    pub valid: Vec<RegionSlope>,
    pub slope_mean: Option<f64>,
    pub slope_variance: Option<f64>,
    /// `(μ, σ²)` of the matched lognormal.
    pub lognormal: Option<(f64, f64)>,
    pub warnings: Vec<String>,
}

impl LinearModulusComparison {
    pub fn valid_count(&self) -> usize {
        self.valid.len()
    }

    /// Lognormal density on `grid`, empty when no region was valid.
    pub fn density(&self, grid: &[f64]) -> Vec<f64> {
        let Some((mu, s2)) = self.lognormal else {
            return Vec::new();
        };
        grid.iter()
            .map(|&x| {
                if x <= 0.0 || s2 == 0.0 {
                    return 0.0;
                }
                let z = x.ln() - mu;
                (-z * z / (2.0 * s2)).exp() / (x * (2.0 * std::f64::consts::PI * s2).sqrt())
            })
            .collect()
    }
}

/// For each experiment whose independent posterior-mean `b` lies below its
/// truncation stretch, fits a line to the data with `b ≤ λ < truncation`.
///
/// `truncation[i] = None` means nothing was trimmed; the window then runs to
/// the last observation inclusive.
pub fn linear_modulus_comparison(
    experiments: &[Experiment],
    b_means: &[f64],
    truncation: &[Option<f64>],
) -> Result<LinearModulusComparison> {
    if experiments.len() != b_means.len() || experiments.len() != truncation.len() {
        return Err(Error::Data("experiments, b means and truncation stretches differ in length".into()));
    }
    let mut valid = Vec::new();
    let mut warnings = Vec::new();
    for ((e, &b), &cut) in experiments.iter().zip(b_means).zip(truncation) {
        let end = cut.unwrap_or(f64::INFINITY);
        if !(b < end) {
            continue;
        }
        let (x, y): (Vec<f64>, Vec<f64>) = e
            .stretch()
            .iter()
            .zip(e.stress())
            .filter(|(l, _)| **l >= b && **l < end)
            .map(|(l, s)| (*l, *s))
            .unzip();
        match ols(&x, &y) {
            Some((slope, _)) => valid.push(RegionSlope {
                id: e.id().to_string(),
                b_mean: b,
                truncation_stretch: cut.unwrap_or(e.max_stretch()),
                points: x.len(),
                slope,
            }),
            None => warnings.push(format!("{}: fewer than two points in [{b}, {end})", e.id())),
        }
    }
    if valid.is_empty() {
        warnings.push("no experiment has a valid linear region".into());
        return Ok(LinearModulusComparison {
            total: experiments.len(),
            valid,
            slope_mean: None,
            slope_variance: None,
            lognormal: None,
            warnings,
        });
    }
    let slopes: Vec<f64> = valid.iter().map(|r| r.slope).collect();
    let m = mean(&slopes);
    let v = variance(&slopes);
    let lognormal = match lognormal_moment_match(m, v) {
        Ok(p) => Some(p),
        Err(e) => {
            warnings.push(e.to_string());
            None
        }
    };
    Ok(LinearModulusComparison {
        total: experiments.len(),
        valid,
        slope_mean: Some(m),
        slope_variance: Some(v),
        lognormal,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    use super::super::{output_columns, output_row, MixedEffectsState, PopulationParams};
    use super::*;
    use crate::dataio::{ChainTable, TendonType};

    #[test]
    fn moment_match_degenerate_variance() {
        let (mu, s2) = lognormal_moment_match(661.157, 0.0).unwrap();
        assert_eq!(s2, 0.0);
        assert_relative_eq!(mu, 661.157f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn moment_match_reproduces_moments() {
        let (mu, s2) = lognormal_moment_match(700.0, 90_000.0).unwrap();
        assert_relative_eq!((mu + 0.5 * s2).exp(), 700.0, max_relative = 1e-12);
        assert_relative_eq!((s2.exp() - 1.0) * (2.0 * mu + s2).exp(), 90_000.0, max_relative = 1e-12);
    }

    #[test]
    fn exact_line_slope() {
        let stretch: Vec<f64> = (0..30).map(|j| 1.0 + 0.004 * j as f64).collect();
        let stress: Vec<f64> = stretch.iter().map(|l| 850.0 * (l - 1.04)).collect();
        let e = Experiment::new("line", TendonType::Cdet, stretch, stress).unwrap();
        let c = linear_modulus_comparison(&[e.clone(), e], &[1.05, 1.2], &[Some(1.1), Some(1.1)]).unwrap();
        assert_eq!(c.valid_count(), 1);
        assert_relative_eq!(c.valid[0].slope, 850.0, max_relative = 1e-10);
        assert_eq!(c.lognormal.unwrap().1, 0.0);
    }

    #[test]
    fn no_valid_regions_warns() {
        let e = Experiment::new("e", TendonType::Sdft, vec![1.0, 1.01, 1.02], vec![0.0, 1.0, 2.0]).unwrap();
        let c = linear_modulus_comparison(&[e], &[1.05], &[Some(1.02)]).unwrap();
        assert_eq!(c.valid_count(), 0);
        assert!(!c.warnings.is_empty());
        assert!(c.density(&[1.0]).is_empty());
    }

    fn posterior_with(pop: &PopulationParams, xi: Vec<[f64; 4]>, copies: usize) -> PopulationPosterior {
        let ids: Vec<String> = (0..xi.len()).map(|i| format!("t{i}")).collect();
        let row = output_row(&MixedEffectsState { xi, pop: pop.clone() });
        let table = ChainTable {
            columns: output_columns(&ids),
            draws: vec![row; copies],
        };
        PopulationPosterior::from_tables(ids, vec![table.clone(), table], 1.05).unwrap()
    }

    #[test]
    fn zero_population_scale_concentrates_predictive() {
        let mu = [1.0, 6.8, -3.8, -3.6];
        let pop = PopulationParams::new(mu, [1e-12; 4], Matrix4::identity()).unwrap();
        let post = posterior_with(&pop, vec![mu], 10);
        let pred = posterior_predictive_params(&post, 20, 0).unwrap();
        let target = from_unconstrained(&UnconstrainedParams::from_slice(&mu)).to_array();
        for k in 0..4 {
            assert_relative_eq!(pred.modes[k], target[k], max_relative = 1e-9);
        }
    }

    #[test]
    fn band_collapses_without_spread_and_widens_with_noise() {
        let mu = [1.0, 6.8, -3.8, -3.6];
        let pop = PopulationParams::new(mu, [0.1; 4], Matrix4::identity()).unwrap();
        let post = posterior_with(&pop, vec![mu], 50);
        let grid = [1.0, 1.03, 1.06];
        let p = from_unconstrained(&UnconstrainedParams::from_slice(&mu));
        let exact = posterior_predictive_stress(&post, 0, &grid, 0.0, 1).unwrap();
        for (j, &l) in grid.iter().enumerate() {
            let m = crate::constitutive::engineering_stress(l, &p).unwrap();
            assert_eq!(exact.lower[j], m);
            assert_eq!(exact.upper[j], m);
        }
        let narrow = posterior_predictive_stress(&post, 0, &grid, 0.2, 1).unwrap();
        let wide = posterior_predictive_stress(&post, 0, &grid, 0.4, 1).unwrap();
        for j in 0..grid.len() {
            assert!(wide.upper[j] - wide.lower[j] > narrow.upper[j] - narrow.lower[j]);
        }
        assert!(posterior_predictive_stress(&post, 1, &grid, 0.2, 1).is_err());
    }
}
