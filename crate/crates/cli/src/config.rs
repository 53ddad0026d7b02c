//! Run configuration: defaults, then the TOML file, then `--paper-scale`,
//! then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tendon_core::dataio::{NoiseConvention, StrainUnit, DEFAULT_FIDELITY_THRESHOLD};
use tendon_core::fidelity::SelectionConfig;
use tendon_core::mixed::{MixedConfig, Parameterization};
use tendon_core::TendonType;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 means one per available core.
    pub workers: usize,
    pub noise_convention: NoiseConvention,
    /// Explicit σ_obs in MPa; overrides `noise_convention` when set.
    pub sigma_obs: Option<f64>,
    pub paper_scale: bool,
    pub strain_unit: StrainUnit,
    /// Overrides the tendon type recorded in input files.
    pub tendon_type: Option<TendonType>,
    pub selection: SelectionSettings,
    pub mixed: MixedSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSettings {
    pub chains: usize,
    pub burn_in: usize,
    pub iterations: usize,
    pub max_draws_per_chain: usize,
    pub threshold: f64,
    pub rhat_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixedSettings {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub thin: usize,
    pub step_size: f64,
    pub adapt_delta: f64,
    pub max_tree_depth: usize,
    pub parameterization: Parameterization,
    pub rhat_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            noise_convention: NoiseConvention::default(),
            sigma_obs: None,
            paper_scale: false,
            strain_unit: StrainUnit::default(),
            tendon_type: None,
            selection: SelectionSettings::default(),
            mixed: MixedSettings::default(),
        }
    }
}

impl Default for SelectionSettings {
    fn default() -> Self {
        let s = SelectionConfig::default();
        SelectionSettings {
            chains: s.chains,
            burn_in: s.burn_in,
            iterations: s.iterations,
            max_draws_per_chain: s.max_draws_per_chain,
            threshold: DEFAULT_FIDELITY_THRESHOLD,
            rhat_threshold: s.rhat_threshold,
        }
    }
}

impl Default for MixedSettings {
    fn default() -> Self {
        let m = MixedConfig::default();
        MixedSettings {
            chains: m.nuts.chains,
            warmup: m.nuts.warmup,
            draws: m.nuts.draws,
            thin: m.nuts.thin,
            step_size: m.nuts.step_size_init,
            adapt_delta: m.nuts.adapt_delta,
            max_tree_depth: m.nuts.max_tree_depth,
            parameterization: m.parameterization,
            rhat_threshold: m.rhat_threshold,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    /// Chain lengths of the original study.
    pub fn apply_paper_scale(&mut self) {
        self.paper_scale = true;
        let s = SelectionConfig::default().paper_scale();
        self.selection.burn_in = s.burn_in;
        self.selection.iterations = s.iterations;
        let m = MixedConfig::default().paper_scale();
        self.mixed.chains = m.nuts.chains;
        self.mixed.draws = m.nuts.draws;
    }

    pub fn sigma_obs(&self) -> f64 {
        self.sigma_obs.unwrap_or_else(|| self.noise_convention.sigma_obs())
    }

    pub fn selection_config(&self, seed: u64) -> SelectionConfig {
        SelectionConfig {
            sigma_obs: self.sigma_obs(),
            chains: self.selection.chains,
            burn_in: self.selection.burn_in,
            iterations: self.selection.iterations,
            max_draws_per_chain: self.selection.max_draws_per_chain,
            seed,
            threshold: self.selection.threshold,
            rhat_threshold: self.selection.rhat_threshold,
            ..SelectionConfig::default()
        }
    }

    pub fn mixed_config(&self) -> MixedConfig {
        let mut m = MixedConfig::default();
        m.nuts.chains = self.mixed.chains;
        m.nuts.warmup = self.mixed.warmup;
        m.nuts.draws = self.mixed.draws;
        m.nuts.thin = self.mixed.thin;
        m.nuts.seed = self.seed;
        m.nuts.step_size_init = self.mixed.step_size;
        m.nuts.adapt_delta = self.mixed.adapt_delta;
        m.nuts.max_tree_depth = self.mixed.max_tree_depth;
        m.parameterization = self.mixed.parameterization;
        m.rhat_threshold = self.mixed.rhat_threshold;
        m
    }
}
