//! Microstructural tendon model under uniaxial, incompressible stretch.
//!
//! The non-collagenous matrix is neo-Hookean. Collagen fibrils are Hookean once
//! the macroscopic stretch exceeds their critical stretch `λ_C`, which follows a
//! symmetric triangular distribution on `[a, b]` with mode `c = (a + b) / 2`.
//! A fibril with critical stretch `x` carries engineering stress
//! `E (1/x - 1/λ)` once `λ > x`, so integrating over the recruitment density
//! gives the engineering stress
//!
//! ```text
//! N(λ) = (1-φ)μ (λ - λ⁻²) + (φE/λ) (A + Bλ + Cλ² + Dλ ln λ)
//! ```
//!
//! with `A, B, C, D` constant within each of the four recruitment regimes
//! (none, partial below the mode, partial above the mode, full).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constrained model parameters `θ = [(1-φ)μ, φE, a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `(1-φ)μ`, MPa.
    pub ncm_term: f64,
    /// `φE`, MPa.
    pub fibril_term: f64,
    /// Lower limit of the critical-stretch distribution.
    pub a: f64,
    /// Upper limit of the critical-stretch distribution.
    pub b: f64,
}

impl ModelParams {
    pub const NAMES: [&'static str; 4] = ["ncm_term", "fibril_term", "a", "b"];

    pub fn new(ncm_term: f64, fibril_term: f64, a: f64, b: f64) -> Result<Self> {
        let p = ModelParams {
            ncm_term,
            fibril_term,
            a,
            b,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.ncm_term, self.fibril_term, self.a, self.b]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain(format!("non-finite parameters {self:?}")));
        }
        if self.ncm_term < 0.0 || self.fibril_term < 0.0 {
            return Err(Error::domain(format!(
                "moduli must be non-negative, got ({}, {})",
                self.ncm_term, self.fibril_term
            )));
        }
        if !(self.a > 1.0 && self.b > self.a) {
            return Err(Error::domain(format!(
                "need 1 < a < b, got a = {}, b = {}",
                self.a, self.b
            )));
        }
        Ok(())
    }

    /// Mode of the recruitment distribution, `c = (a + b) / 2`.
    pub fn mode(&self) -> f64 {
        0.5 * (self.a + self.b)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.ncm_term, self.fibril_term, self.a, self.b]
    }
}

/// Unconstrained parameters `ξ = [ν, η, τ, ρ]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UnconstrainedParams {
    pub nu: f64,
    pub eta: f64,
    pub tau: f64,
    pub rho: f64,
}

impl UnconstrainedParams {
    pub const NAMES: [&'static str; 4] = ["nu", "eta", "tau", "rho"];

    pub fn new(nu: f64, eta: f64, tau: f64, rho: f64) -> Self {
        UnconstrainedParams { nu, eta, tau, rho }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        UnconstrainedParams::new(x[0], x[1], x[2], x[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.nu, self.eta, self.tau, self.rho]
    }
}

/// Uniaxial incompressible deformation with longitudinal stretch `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deformation {
    lambda: f64,
}

impl Deformation {
    pub fn new(lambda: f64) -> Result<Self> {
        check_stretch(lambda)?;
        Ok(Deformation { lambda })
    }

    pub fn stretch(&self) -> f64 {
        self.lambda
    }

    pub fn i1(&self) -> f64 {
        self.lambda * self.lambda + 2.0 / self.lambda
    }

    pub fn i3(&self) -> f64 {
        1.0
    }

    pub fn i4(&self) -> f64 {
        self.lambda * self.lambda
    }
}

/// Recruitment regime selected by `I4 = λ²` against `a², c², b²`.
///
/// Boundaries are right-continuous: `λ = c` is already [`Regime::UpperRecruitment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Slack,
    LowerRecruitment,
    UpperRecruitment,
    Full,
}

impl Regime {
    pub fn of(lambda: f64, a: f64, b: f64) -> Regime {
        let i4 = lambda * lambda;
        let c = 0.5 * (a + b);
        if i4 < a * a {
            Regime::Slack
        } else if i4 < c * c {
            Regime::LowerRecruitment
        } else if i4 < b * b {
            Regime::UpperRecruitment
        } else {
            Regime::Full
        }
    }
}

/// Regime coefficients of the fibril stress, `N_f = (φE/λ)(A + Bλ + Cλ² + Dλ ln λ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FibrilCoefficients {
    pub regime: Regime,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

fn check_stretch(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 1.0 {
        return Err(Error::domain(format!(
            "stretch must be finite and >= 1, got {lambda}"
        )));
    }
    Ok(())
}

fn check_support(a: f64, b: f64) -> Result<()> {
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::domain(format!(
            "recruitment support needs a < b, got a = {a}, b = {b}"
        )));
    }
    Ok(())
}

/// `4 / (b - a)²`: the slope of the triangular density on each side of the mode.
fn density_slope(a: f64, b: f64) -> f64 {
    let w = b - a;
    4.0 / (w * w)
}

/// `s + s²/2 - (1+s) ln(1+s)`, i.e. `u²/2 - u ln u - 1/2` at `u = 1 + s`.
fn lower_shape(s: f64) -> f64 {
    if s.abs() < 0.1 {
        // Σ_{n≥3} (-1)^{n+1} sⁿ / (n(n-1))
        let mut term = s * s * s;
        let mut sum = 0.0;
        let mut sign = 1.0;
        for n in 3..40 {
            let nf = n as f64;
            let add = sign * term / (nf * (nf - 1.0));
            sum += add;
            if add.abs() <= 1e-18 * sum.abs() {
                break;
            }
            term *= s;
            sign = -sign;
        }
        sum
    } else {
        s + 0.5 * s * s - (1.0 + s) * s.ln_1p()
    }
}

/// `(1-d) ln(1-d) + (1+d) ln(1+d) = Σ_{n≥1} d^{2n} / (n(2n-1))`.
fn full_shape(d: f64) -> f64 {
    if d.abs() < 0.1 {
        let d2 = d * d;
        let mut term = d2;
        let mut sum = 0.0;
        for n in 1..40 {
            let nf = n as f64;
            let add = term / (nf * (2.0 * nf - 1.0));
            sum += add;
            if add <= 1e-18 * sum {
                break;
            }
            term *= d2;
        }
        sum
    } else {
        (1.0 - d) * (-d).ln_1p() + (1.0 + d) * d.ln_1p()
    }
}

/// Dimensionless fibril response `g(λ) = λ N_f / φE` with its partial
/// derivatives with respect to `a` and `b`.
fn fibril_response(lambda: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let k = density_slope(a, b);
    let dk_da = 2.0 * k / (b - a);
    let dk_db = -dk_da;
    let c = 0.5 * (a + b);
    match Regime::of(lambda, a, b) {
        Regime::Slack => (0.0, 0.0, 0.0),
        Regime::LowerRecruitment => {
            let s = (lambda - a) / a;
            let h = a * a * lower_shape(s);
            let dh_da = a * (s - (1.0 + s) * s.ln_1p());
            (k * h, dk_da * h + k * dh_da, dk_db * h)
        }
        Regime::UpperRecruitment => {
            // Full-recruitment form minus the fibrils still slack in (λ, b).
            let h = lambda * c * full_shape((b - a) / (a + b)) - b * b * lower_shape((lambda - b) / b);
            let dh_da = lambda * (a / c).ln();
            let dh_db = b - lambda + lambda * (lambda / c).ln();
            (k * h - 1.0, dk_da * h + k * dh_da, dk_db * h + k * dh_db)
        }
        Regime::Full => {
            let h = lambda * c * full_shape((b - a) / (a + b));
            let dh_da = lambda * (a / c).ln();
            let dh_db = lambda * (b / c).ln();
            (k * h - 1.0, dk_da * h + k * dh_da, dk_db * h + k * dh_db)
        }
    }
}

fn regime_coefficients(regime: Regime, a: f64, b: f64) -> (f64, f64, f64, f64) {
    let k = density_slope(a, b);
    let c = 0.5 * (a + b);
    match regime {
        Regime::Slack => (0.0, 0.0, 0.0, 0.0),
        Regime::LowerRecruitment => (-0.5 * k * a * a, k * a * a.ln(), 0.5 * k, -k * a),
        Regime::UpperRecruitment => (
            0.5 * k * b * b - 1.0,
            k * (a * a.ln() - (a + b) * c.ln()),
            -0.5 * k,
            k * b,
        ),
        Regime::Full => (-1.0, k * (a * a.ln() + b * b.ln() - (a + b) * c.ln()), 0.0, 0.0),
    }
}

/// The piecewise-constant coefficients `A, B, C, D` at stretch `λ`.
pub fn fibril_coefficients(lambda: f64, a: f64, b: f64) -> Result<FibrilCoefficients> {
    check_stretch(lambda)?;
    check_support(a, b)?;
    let regime = Regime::of(lambda, a, b);
    let (ca, cb, cc, cd) = regime_coefficients(regime, a, b);
    Ok(FibrilCoefficients {
        regime,
        a: ca,
        b: cb,
        c: cc,
        d: cd,
    })
}

/// Fibril contribution to the engineering stress, MPa.
pub fn fibril_stress(lambda: f64, params: &ModelParams) -> Result<f64> {
    check_stretch(lambda)?;
    params.validate()?;
    Ok(fibril_stress_unchecked(lambda, params))
}

#[inline]
fn fibril_stress_unchecked(lambda: f64, params: &ModelParams) -> f64 {
    let (g, _, _) = fibril_response(lambda, params.a, params.b);
    params.fibril_term * g / lambda
}

/// Engineering stress `N(λ)`, MPa.
pub fn engineering_stress(lambda: f64, params: &ModelParams) -> Result<f64> {
    check_stretch(lambda)?;
    params.validate()?;
    Ok(stress_unchecked(lambda, params))
}

/// Engineering stress for parameters already known to be valid and `λ ≥ 1`.
#[inline]
pub(crate) fn stress_unchecked(lambda: f64, params: &ModelParams) -> f64 {
    params.ncm_term * (lambda - 1.0 / (lambda * lambda)) + fibril_stress_unchecked(lambda, params)
}

/// Engineering stress and its gradient with respect to `θ = [(1-φ)μ, φE, a, b]`.
pub fn stress_and_gradient(lambda: f64, params: &ModelParams) -> Result<(f64, [f64; 4])> {
    check_stretch(lambda)?;
    params.validate()?;
    Ok(stress_and_gradient_unchecked(lambda, params))
}

#[inline]
pub(crate) fn stress_and_gradient_unchecked(lambda: f64, params: &ModelParams) -> (f64, [f64; 4]) {
    let ncm_basis = lambda - 1.0 / (lambda * lambda);
    let (g, dg_da, dg_db) = fibril_response(lambda, params.a, params.b);
    let inv = 1.0 / lambda;
    let n = params.ncm_term * ncm_basis + params.fibril_term * g * inv;
    let grad = [
        ncm_basis,
        g * inv,
        params.fibril_term * dg_da * inv,
        params.fibril_term * dg_db * inv,
    ];
    (n, grad)
}

/// Engineering stress and its gradient with respect to the unconstrained `ξ`.
pub(crate) fn stress_and_gradient_xi(lambda: f64, xi: &UnconstrainedParams) -> (f64, [f64; 4]) {
    let params = from_unconstrained(xi);
    let (n, g) = stress_and_gradient_unchecked(lambda, &params);
    let e_nu = xi.nu.exp();
    let e_eta = xi.eta.exp();
    let e_tau = xi.tau.exp();
    let e_rho = xi.rho.exp();
    // a = e^τ + 1, b = e^ρ + e^τ + 1
    (
        n,
        [g[0] * e_nu, g[1] * e_eta, (g[2] + g[3]) * e_tau, g[3] * e_rho],
    )
}

/// `J(s) = 3s/2 + s²/4 - (3/2 + s) ln(1+s)`, the energy per `φE x²` of the
/// fibrils recruited by a unit ramp density starting at `x`, with
/// `s = (λ - x)/x`; zero for `s ≤ 0`.
fn ramp_energy_shape(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s < 0.3 {
        // Σ_{n≥4} (-1)ⁿ (n-3) sⁿ / (2n(n-1))
        let mut term = s.powi(4);
        let mut sum = 0.0;
        let mut sign = 1.0;
        for n in 4..120 {
            let nf = n as f64;
            let add = sign * (nf - 3.0) * term / (2.0 * nf * (nf - 1.0));
            sum += add;
            if add.abs() <= 1e-18 * sum.abs() {
                break;
            }
            term *= s;
            sign = -sign;
        }
        sum
    } else {
        1.5 * s + 0.25 * s * s - (1.5 + s) * s.ln_1p()
    }
}

/// Fibril energy `W_f / φE`.
///
/// The triangular density is `k[(x-a)₊ - 2(x-c)₊ + (x-b)₊]`, so the energy is
/// the same combination of single-ramp energies; it is zero up to `a` and
/// continuous across regimes.
fn fibril_energy_at(lambda: f64, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    if lambda >= b {
        // Past b the three ramps cancel to a second difference; the mean-field
        // form keeps every term of the order of the result.
        let d = (b - a) / (a + b);
        let u = (lambda - c) / c;
        return (1.0 + u) * full_excess(d) + log_excess(u) - log_mean_deficit(d);
    }
    let ramp = |x: f64| x * x * ramp_energy_shape((lambda - x) / x);
    density_slope(a, b) * (ramp(a) - 2.0 * ramp(c) + ramp(b))
}

/// `full_shape(d) / d² - 1 = Σ_{n≥2} d^{2n-2} / (n(2n-1))`, i.e. `c⟨1/λ_c⟩ - 1`.
fn full_excess(d: f64) -> f64 {
    if d < 0.5 {
        let d2 = d * d;
        let mut term = d2;
        let mut sum = 0.0;
        for n in 2..80 {
            let nf = n as f64;
            let add = term / (nf * (2.0 * nf - 1.0));
            sum += add;
            if add <= 1e-18 * sum {
                break;
            }
            term *= d2;
        }
        sum
    } else {
        full_shape(d) / (d * d) - 1.0
    }
}

/// `-⟨ln(λ_c / c)⟩ = Σ_{j≥1} d^{2j} / (j(2j+1)(2j+2))` under the triangular density.
fn log_mean_deficit(d: f64) -> f64 {
    if d < 0.5 {
        let d2 = d * d;
        let mut term = d2;
        let mut sum = 0.0;
        for j in 1..80 {
            let jf = j as f64;
            let add = term / (jf * (2.0 * jf + 1.0) * (2.0 * jf + 2.0));
            sum += add;
            if add <= 1e-18 * sum {
                break;
            }
            term *= d2;
        }
        sum
    } else {
        let (p, m) = (1.0 + d, 1.0 - d);
        let upper = p * p * p.ln() - 2.0 * p * d + 0.5 * (p * p - 1.0);
        let lower = 0.5 * (1.0 - m * m) - 2.0 * m * d - m * m * m.ln();
        -0.5 * (upper - lower) / (d * d)
    }
}

/// `u - ln(1+u)`.
fn log_excess(u: f64) -> f64 {
    if u.abs() < 0.1 {
        // Σ_{n≥2} (-1)ⁿ uⁿ / n
        let mut term = u * u;
        let mut sum = 0.0;
        let mut sign = 1.0;
        for n in 2..60 {
            let add = sign * term / n as f64;
            sum += add;
            if add.abs() <= 1e-18 * sum.abs() {
                break;
            }
            term *= u;
            sign = -sign;
        }
        sum
    } else {
        u - u.ln_1p()
    }
}

/// Strain-energy density `W(λ)`, MPa, with `W(1) = 0` and continuity across
/// regimes; `dW/dλ = N(λ)`.
pub fn strain_energy(lambda: f64, params: &ModelParams) -> Result<f64> {
    check_stretch(lambda)?;
    params.validate()?;
    // I1 - 3 = (λ-1)²(λ+2)/λ, free of cancellation near λ = 1.
    let ncm = 0.5 * params.ncm_term * (lambda - 1.0).powi(2) * (lambda + 2.0) / lambda;
    Ok(ncm + params.fibril_term * fibril_energy_at(lambda, params.a, params.b))
}

/// Density of the symmetric triangular recruitment distribution on `[a, b]`.
pub fn recruitment_pdf(lambda_c: f64, a: f64, b: f64) -> Result<f64> {
    check_support(a, b)?;
    let k = density_slope(a, b);
    let c = 0.5 * (a + b);
    Ok(if lambda_c <= a || lambda_c >= b {
        0.0
    } else if lambda_c < c {
        k * (lambda_c - a)
    } else {
        k * (b - lambda_c)
    })
}

/// CDF of the symmetric triangular recruitment distribution on `[a, b]`.
pub fn recruitment_cdf(lambda_c: f64, a: f64, b: f64) -> Result<f64> {
    check_support(a, b)?;
    let k = density_slope(a, b);
    let c = 0.5 * (a + b);
    Ok(if lambda_c <= a {
        0.0
    } else if lambda_c >= b {
        1.0
    } else if lambda_c < c {
        0.5 * k * (lambda_c - a).powi(2)
    } else {
        1.0 - 0.5 * k * (b - lambda_c).powi(2)
    })
}

/// Fibril stress once every fibril is recruited,
/// `(φE/λ)(-1 + 4λ (a ln(a/c) + b ln(b/c)) / (a-b)²)`.
pub fn linear_regime_stress(lambda: f64, params: &ModelParams) -> Result<f64> {
    check_stretch(lambda)?;
    params.validate()?;
    let (a, b, c) = (params.a, params.b, params.mode());
    let k = density_slope(a, b);
    Ok(params.fibril_term / lambda * (-1.0 + lambda * k * c * full_shape((b - a) / (a + b))))
}

/// Linear modulus `φE / λ̄²`, valid only in the fully recruited regime.
pub fn linear_modulus(params: &ModelParams, lambda_bar: f64) -> Result<f64> {
    params.validate()?;
    if !lambda_bar.is_finite() || lambda_bar < params.b {
        return Err(Error::domain(format!(
            "linear modulus needs full recruitment: λ̄ = {lambda_bar} < b = {}",
            params.b
        )));
    }
    Ok(params.fibril_term / (lambda_bar * lambda_bar))
}

/// `ξ = [ln((1-φ)μ), ln(φE), ln(a-1), ln(b-a)]`.
pub fn to_unconstrained(params: &ModelParams) -> Result<UnconstrainedParams> {
    params.validate()?;
    if params.ncm_term == 0.0 || params.fibril_term == 0.0 {
        return Err(Error::domain(
            "zero modulus has no unconstrained representation",
        ));
    }
    Ok(UnconstrainedParams {
        nu: params.ncm_term.ln(),
        eta: params.fibril_term.ln(),
        tau: (params.a - 1.0).ln(),
        rho: (params.b - params.a).ln(),
    })
}

/// Inverse of [`to_unconstrained`]; defined for every real `ξ`.
pub fn from_unconstrained(xi: &UnconstrainedParams) -> ModelParams {
    let a = xi.tau.exp() + 1.0;
    ModelParams {
        ncm_term: xi.nu.exp(),
        fibril_term: xi.eta.exp(),
        a,
        b: a + xi.rho.exp(),
    }
}

/// `ln |det dθ/dξ| = ν + η + τ + ρ` for the map [`from_unconstrained`].
pub fn log_abs_det_jacobian(xi: &UnconstrainedParams) -> f64 {
    xi.nu + xi.eta + xi.tau + xi.rho
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    fn reference() -> ModelParams {
        ModelParams::new(1.0, 800.0, 1.02, 1.06).unwrap()
    }

    #[test]
    fn reference_state_is_stress_and_energy_free() {
        let p = reference();
        assert_eq!(engineering_stress(1.0, &p).unwrap(), 0.0);
        assert_eq!(strain_energy(1.0, &p).unwrap(), 0.0);
    }

    /// `∫₁^λ N` with `N` from its defining integral, 40-digit quadrature.
    #[test]
    fn energy_matches_integrated_stress() {
        let p = reference();
        for (lambda, w) in [
            (1.001, 1.499000999000999001e-6),
            (1.03, 0.0021154286985847660829),
            (1.045, 0.033244393834607757855),
            (1.1, 1.3238692556585730193),
        ] {
            assert_relative_eq!(strain_energy(lambda, &p).unwrap(), w, max_relative = 1e-13);
        }
    }

    #[test]
    fn ramp_energy_series_meets_closed_form() {
        for s in [0.2999999, 0.3] {
            let closed = 1.5 * s + 0.25 * s * s - (1.5 + s) * f64::ln_1p(s);
            assert_relative_eq!(ramp_energy_shape(s), closed, max_relative = 1e-9);
        }
        assert_eq!(ramp_energy_shape(-0.2), 0.0);
        assert_relative_eq!(ramp_energy_shape(1e-3), 1e-12 / 24.0, max_relative = 2e-3);
    }

    #[test]
    fn neo_hookean_only() {
        let p = ModelParams::new(2.0, 0.0, 1.02, 1.06).unwrap();
        assert_relative_eq!(
            engineering_stress(1.2, &p).unwrap(),
            2.0 * (1.2 - 1.0 / 1.44),
            max_relative = 1e-14
        );
        assert_relative_eq!(engineering_stress(1.2, &p).unwrap(), 1.011111, epsilon = 1e-6);
        let w = strain_energy(1.2, &p).unwrap();
        assert_relative_eq!(w, 1.0 * (1.44 + 2.0 / 1.2 - 3.0), max_relative = 1e-14);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(ModelParams::new(1.0, 1.0, 1.0, 1.1).is_err());
        assert!(ModelParams::new(1.0, 1.0, 1.1, 1.1).is_err());
        assert!(ModelParams::new(-1.0, 1.0, 1.02, 1.1).is_err());
        let p = reference();
        assert!(engineering_stress(0.999, &p).is_err());
        assert!(strain_energy(f64::NAN, &p).is_err());
        assert!(recruitment_cdf(1.0, 1.1, 1.1).is_err());
    }

    #[test]
    fn recruitment_cdf_values() {
        assert_eq!(recruitment_cdf(1.04, 1.02, 1.06).unwrap(), 0.5);
        assert_eq!(recruitment_cdf(1.0, 1.02, 1.06).unwrap(), 0.0);
        assert_eq!(recruitment_cdf(1.07, 1.02, 1.06).unwrap(), 1.0);
        assert_relative_eq!(recruitment_cdf(1.03, 1.02, 1.06).unwrap(), 0.125, max_relative = 1e-12);
    }

    #[test]
    fn coefficient_form_matches_stable_form() {
        let p = reference();
        for i in 0..200 {
            let lambda = 1.0 + 0.1 * i as f64 / 199.0;
            let co = fibril_coefficients(lambda, p.a, p.b).unwrap();
            let poly = co.a + co.b * lambda + co.c * lambda * lambda + co.d * lambda * lambda.ln();
            let n = fibril_stress(lambda, &p).unwrap();
            assert!((p.fibril_term * poly / lambda - n).abs() < 1e-8, "λ = {lambda}");
        }
    }

    #[test]
    fn full_regime_matches_linear_form() {
        // 40-digit evaluations of φE/λ (−1 + λk(a ln(a/c) + b ln(b/c))).
        let p = reference();
        let exact = [
            (1.06, 14.561208252990747793),
            (1.08, 28.537448644325489542),
            (1.2, 102.61152271839949021),
        ];
        for (l, n) in exact {
            assert_relative_eq!(fibril_stress(l, &p).unwrap(), n, max_relative = 1e-13);
            assert_relative_eq!(linear_regime_stress(l, &p).unwrap(), n, max_relative = 1e-13);
        }
    }

    #[test]
    fn upper_regime_is_free_of_cancellation() {
        // Second differences in τ at spacing 1e-9 stay at round-off level.
        for &l in &[1.04, 1.045] {
            let v: Vec<f64> = (0..6)
                .map(|k| {
                    let xi = UnconstrainedParams::new(1.0, 6.8, -3.8 + 1e-9 * k as f64, -3.6);
                    engineering_stress(l, &from_unconstrained(&xi)).unwrap()
                })
                .collect();
            for k in 1..5 {
                assert!(((v[k + 1] - 2.0 * v[k] + v[k - 1]) / v[k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn regime_boundaries_are_right_continuous() {
        assert_eq!(Regime::of(1.02, 1.02, 1.06), Regime::LowerRecruitment);
        assert_eq!(Regime::of(1.04, 1.02, 1.06), Regime::UpperRecruitment);
        assert_eq!(Regime::of(1.06, 1.02, 1.06), Regime::Full);
        assert_eq!(Regime::of(1.019, 1.02, 1.06), Regime::Slack);
    }

    #[test]
    fn linear_modulus_values() {
        let p = ModelParams::new(1.0, 800.0, 1.02, 1.06).unwrap();
        assert_relative_eq!(linear_modulus(&p, 1.1).unwrap(), 661.157, epsilon = 1e-3);
        assert!(linear_modulus(&p, 1.05).is_err());
        let q = ModelParams::new(1.0, 811.5, 1.0000001, 1.0000002).unwrap();
        let lm = linear_modulus(&q, 1.000001).unwrap();
        assert!(lm < 811.5 && (811.5 - lm) < 1e-2);
    }

    #[test]
    fn transform_values() {
        let p = ModelParams::new(1.0, 1.0, 2.0, 3.0).unwrap();
        let xi = to_unconstrained(&p).unwrap();
        assert_eq!(xi.to_array(), [0.0; 4]);

        let prior = UnconstrainedParams::new(1.05309738, 6.83672018, -3.80045123, -3.59771868);
        let q = from_unconstrained(&prior);
        assert_relative_eq!(q.ncm_term, 1.05309738_f64.exp(), max_relative = 1e-15);
        assert_relative_eq!(q.fibril_term, 6.83672018_f64.exp(), max_relative = 1e-15);
        assert_relative_eq!(q.a, 1.0 + (-3.80045123_f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(q.b, q.a + (-3.59771868_f64).exp(), max_relative = 1e-15);
        // Rounded reference values.
        assert_relative_eq!(q.ncm_term, 2.8665, max_relative = 1e-4);
        assert_relative_eq!(q.fibril_term, 931.36, max_relative = 1e-4);
        assert_relative_eq!(q.a, 1.022352, max_relative = 1e-4);
        assert_relative_eq!(q.b, 1.049725, max_relative = 1e-4);

        let zero = ModelParams {
            ncm_term: 0.0,
            ..p
        };
        assert!(to_unconstrained(&zero).is_err());
    }

    #[test]
    fn jacobian_values() {
        assert_eq!(log_abs_det_jacobian(&UnconstrainedParams::default()), 0.0);
        assert_eq!(
            log_abs_det_jacobian(&UnconstrainedParams::new(1.0, 1.0, 1.0, 1.0)),
            4.0
        );
    }

    #[test]
    fn invariants_of_deformation() {
        let d = Deformation::new(1.1).unwrap();
        assert_relative_eq!(d.i4(), 1.21, max_relative = 1e-15);
        assert_relative_eq!(d.i1(), 1.21 + 2.0 / 1.1, max_relative = 1e-15);
        assert_eq!(d.i3(), 1.0);
        assert!(Deformation::new(0.9).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let p = reference();
        for &l in &[1.01, 1.025, 1.035, 1.045, 1.055, 1.08] {
            let (_, g) = stress_and_gradient(l, &p).unwrap();
            let base = p.to_array();
            for k in 0..4 {
                // Smaller steps are swamped by round-off in the recruitment forms.
                let h = 1e-5 * base[k].abs().max(1.0);
                let mut up = base;
                let mut dn = base;
                up[k] += h;
                dn[k] -= h;
                let pu = ModelParams::new(up[0], up[1], up[2], up[3]).unwrap();
                let pd = ModelParams::new(dn[0], dn[1], dn[2], dn[3]).unwrap();
                let fd = (engineering_stress(l, &pu).unwrap() - engineering_stress(l, &pd).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() <= 1e-5 * fd.abs().max(1.0),
                    "λ = {l}, k = {k}: fd {fd} vs {}",
                    g[k]
                );
            }
        }
    }
}
