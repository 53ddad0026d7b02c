//! Two-stage Bayesian inference for a microstructural tendon model.
//!
//! Stage one ([`fidelity`]) infers per-observation fidelity weights for each
//! stress–stretch experiment and truncates the data where the elastic model
//! stops describing it. Stage two ([`mixed`]) fits a Bayesian mixed-effects
//! model to the truncated, re-weighted population with NUTS.

pub mod constitutive;
pub mod dataio;
pub mod error;
pub mod fidelity;
pub mod mixed;
pub mod samplers;
pub mod stats;
pub mod synth;

pub use constitutive::{
    engineering_stress, from_unconstrained, linear_modulus, log_abs_det_jacobian,
    recruitment_cdf, strain_energy, to_unconstrained, Deformation, ModelParams, Regime,
    UnconstrainedParams,
};
pub use dataio::{Experiment, Population, TendonType};
pub use error::{Error, Result};
pub use fidelity::{FidelityField, FidelityPriorSpec, FidelitySummary, SelectionConfig};
pub use mixed::{MixedEffectsState, PopulationParams, PopulationPosterior};
pub use samplers::{Chain, GibbsBlockSpec, LogDensity, LogDensityGrad};
