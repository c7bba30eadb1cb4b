//! Fluctuation rates from resonance counting and golden-rule lifetimes.

use crate::error::{ensure, Result};
use crate::levels::{level_energy, matrix_elements, MatrixElements};
use crate::material::{HyperfineState, MaterialParams};
use crate::quad::{integrate, integrate_to_infinity, Tolerance};
use crate::units::{angular, fwhm_to_sigma, TWO_PI};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::{E, PI};

/// Rates below this are returned as exactly zero.
pub const RATE_FLOOR_HZ: f64 = 1e-12;

/// Species whose fluctuation time exceeds this are reported quasi-static.
pub const QUASI_STATIC_TIME_S: f64 = 1.0;

/// Crystal-field and internal-field disorder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisorderModel {
    /// Standard deviation W_Δ of the Gaussian crystal-field distribution, Hz.
    pub w_delta_hz: f64,
    /// FWHM of the internal field distribution per hyperfine species, T.
    pub dh_fwhm_t: [f64; 4],
    /// Residual field setting the typical moment of a clock ion, T.
    pub dh_typical_t: f64,
}

impl DisorderModel {
    pub fn validate(&self) -> Result<()> {
        ensure(self.w_delta_hz > 0.0 && self.w_delta_hz.is_finite(), "w_delta_hz", || {
            format!("must be > 0, got {}", self.w_delta_hz)
        })?;
        ensure(self.dh_fwhm_t.iter().all(|w| *w >= 0.0), "dh_fwhm_t", || "widths must be >= 0".into())?;
        Ok(())
    }

    /// RMS internal field of a species expressed as an energy, Hz.
    pub fn dh_sigma_hz(&self, params: &MaterialParams, iz: HyperfineState) -> f64 {
        params.zeeman_hz_per_t() * fwhm_to_sigma(self.dh_fwhm_t[iz.index()])
    }
}

/// Normalized Gaussian density of width `sigma` evaluated at offset `x`.
pub fn gaussian(x: f64, sigma: f64) -> f64 {
    (-0.5 * (x / sigma).powi(2)).exp() / ((2.0 * PI).sqrt() * sigma)
}

/// Resonance-counting coefficients c₁ = c_res/c_N and c₂ = c_τ/c_res.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateParams {
    pub c1: f64,
    pub c2: f64,
}

impl RateParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.c1 > 0.0 && self.c1.is_finite(), "c1", || format!("must be > 0, got {}", self.c1))?;
        ensure(self.c2 > 0.0 && self.c2.is_finite(), "c2", || format!("must be > 0, got {}", self.c2))?;
        Ok(())
    }

    /// Coefficients equivalent to the single-constant form
    /// (2J/α)·exp[(α − 1)/(cα)].
    pub fn from_single_coefficient(c: f64) -> Self {
        RateParams {
            c1: c,
            c2: (1.0 / c - 1.0).exp(),
        }
    }
}

/// Hopping between a typical site and its strongest neighbor, (8π/9√3)·n·J₀, Hz.
pub fn j_typ(params: &MaterialParams) -> f64 {
    8.0 * PI / (9.0 * 3f64.sqrt()) * params.species_density() * params.j0_hz_m3()
}

/// Disorder parameter 4·J_typ·ρ_Δ(ω_p) for the crystal-field distribution alone.
pub fn alpha(params: &MaterialParams, disorder: &DisorderModel, omega_p_hz: f64) -> f64 {
    4.0 * j_typ(params) * gaussian(omega_p_hz - params.delta_hz, disorder.w_delta_hz)
}

/// Effective width √(W_Δ² + ⟨δh²⟩m²) seen by a hyperfine species at field `b_z_t`, Hz.
pub fn hyperfine_disorder(params: &MaterialParams, disorder: &DisorderModel, iz: HyperfineState, b_z_t: f64) -> f64 {
    let m = matrix_elements(params, iz, b_z_t, 0.0).diag;
    disorder.w_delta_hz.hypot(disorder.dh_sigma_hz(params, iz) * m)
}

/// Hopping, disorder width and α of one species probed at `omega_p_hz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeciesDisorder {
    pub hopping_hz: f64,
    pub width_hz: f64,
    pub alpha: f64,
    pub elements: MatrixElements,
}

pub fn species_disorder(
    params: &MaterialParams,
    disorder: &DisorderModel,
    iz: HyperfineState,
    b_z_t: f64,
    omega_p_hz: f64,
) -> SpeciesDisorder {
    let elements = matrix_elements(params, iz, b_z_t, 0.0);
    let hopping = j_typ(params) * elements.off * elements.off;
    let width = hyperfine_disorder(params, disorder, iz, b_z_t);
    let center = level_energy(params, iz, b_z_t, 0.0);
    SpeciesDisorder {
        hopping_hz: hopping,
        width_hz: width,
        alpha: 4.0 * hopping * gaussian(omega_p_hz - center, width),
        elements,
    }
}

/// 2e·c₂·(J/α)·exp(−1/(c₁α)) as an angular rate (1/s), with J in Hz.
pub fn flip_rate(hopping_hz: f64, alpha: f64, rates: &RateParams) -> f64 {
    if !(alpha > 0.0) {
        return 0.0;
    }
    let log_rate = (2.0 * E * rates.c2 * angular(hopping_hz) / alpha).ln() - 1.0 / (rates.c1 * alpha);
    let v = log_rate.exp();
    if v < RATE_FLOOR_HZ {
        0.0
    } else {
        v
    }
}

/// Single-constant main-text form (2J/α)·exp[(α − 1)/(cα)], 1/s.
pub fn flip_rate_single_constant(hopping_hz: f64, alpha: f64, c: f64) -> f64 {
    2.0 * angular(hopping_hz) / alpha * ((alpha - 1.0) / (c * alpha)).exp()
}

/// Typical flip rate 1/τ_s of species `iz` at probe frequency `omega_p_hz`, 1/s.
pub fn tau_s_inv(
    params: &MaterialParams,
    disorder: &DisorderModel,
    rates: &RateParams,
    omega_p_hz: f64,
    iz: HyperfineState,
    b_z_t: f64,
) -> f64 {
    let s = species_disorder(params, disorder, iz, b_z_t, omega_p_hz);
    flip_rate(s.hopping_hz, s.alpha, rates)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    /// Fluctuation rate κ, 1/s.
    pub kappa: f64,
    pub alpha: f64,
    pub w_iz_hz: f64,
    pub quasi_static: bool,
}

impl RateEntry {
    pub fn flip_time(&self) -> f64 {
        1.0 / self.kappa
    }
}

/// Fluctuation rates of every hyperfine species, each at its own resonance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub b_z_t: f64,
    pub entries: BTreeMap<HyperfineState, RateEntry>,
}

impl RateTable {
    pub fn build(params: &MaterialParams, disorder: &DisorderModel, rates: &RateParams, b_z_t: f64) -> Self {
        let entries = HyperfineState::ALL
            .into_iter()
            .map(|iz| {
                let center = level_energy(params, iz, b_z_t, 0.0);
                let s = species_disorder(params, disorder, iz, b_z_t, center);
                let kappa = flip_rate(s.hopping_hz, s.alpha, rates);
                let entry = RateEntry {
                    kappa,
                    alpha: s.alpha,
                    w_iz_hz: s.width_hz,
                    quasi_static: kappa * QUASI_STATIC_TIME_S < 1.0,
                };
                (iz, entry)
            })
            .collect();
        RateTable { b_z_t, entries }
    }

    pub fn get(&self, iz: HyperfineState) -> &RateEntry {
        &self.entries[&iz]
    }

    pub fn kappa(&self, iz: HyperfineState) -> f64 {
        self.get(iz).kappa
    }
}

/// Lorentzian (1/π)·Γ/(Γ² + (ω − ω_p)²) with Γ = 1/(2τ_s); all frequencies angular.
pub fn spectral_function(omega_p: f64, omega: f64, tau_s: f64) -> f64 {
    let g = 0.5 / tau_s;
    g / (PI * (g * g + (omega - omega_p).powi(2)))
}

/// ⟨√A(ω_p; ω)⟩ over the Gaussian crystal-field distribution, in (rad/s)^(−1/2).
fn mean_sqrt_lorentzian(params: &MaterialParams, disorder: &DisorderModel, omega_p_hz: f64, tau_s: f64) -> Result<f64> {
    let w = angular(disorder.w_delta_hz);
    let center = angular(params.delta_hz);
    let wp = angular(omega_p_hz);
    let f = |om: f64| gaussian(om - center, w) * spectral_function(wp, om, tau_s).sqrt();
    let (lo, hi) = (center - 8.0 * w, center + 8.0 * w);
    let tol = Tolerance::relative(1e-6);
    let value = if wp > lo && wp < hi {
        integrate(f, lo, wp, tol)?.value + integrate(f, wp, hi, tol)?.value
    } else {
        integrate(f, lo, hi, tol)?.value
    };
    Ok(value)
}

/// Golden-rule lifetime T₁ = [4π² J_typ² ⟨√A⟩²]⁻¹ of a rare isolated ion, s.
pub fn golden_rule_t1(params: &MaterialParams, disorder: &DisorderModel, omega_p_hz: f64, tau_s: f64) -> Result<f64> {
    ensure(tau_s > 0.0, "tau_s", || format!("must be > 0, got {tau_s}"))?;
    let m = mean_sqrt_lorentzian(params, disorder, omega_p_hz, tau_s)?;
    let j = angular(j_typ(params));
    Ok(1.0 / (4.0 * PI * PI * j * j * m * m))
}

/// Lifetime of a compact pair, three times shorter than a single ion at the same frequency, s.
pub fn pair_t1(params: &MaterialParams, disorder: &DisorderModel, omega_p_hz: f64, tau_s: f64) -> Result<f64> {
    Ok(golden_rule_t1(params, disorder, omega_p_hz, tau_s)? / 3.0)
}

/// Large-detuning estimate 6π(J_typ/Δω_p)²/τ_s of the inverse pair lifetime, 1/s.
pub fn pair_t1_inv_asymptote(params: &MaterialParams, omega_p_hz: f64, tau_s: f64) -> f64 {
    let r = j_typ(params) / (omega_p_hz - params.delta_hz);
    6.0 * PI * r * r / tau_s
}

/// Interpolation between e^(−t/τ_s) and exp(−√(t/T₁)).
pub fn decay_suppression_single(t: f64, tau_s: f64, t1: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let u = t / tau_s;
    (-u / (1.0 + u * (t1 / t).sqrt())).exp()
}

/// exp(−√(t/T₁,pair)).
pub fn decay_suppression_pair(t: f64, t1_pair: f64) -> f64 {
    (-(t.max(0.0) / t1_pair).sqrt()).exp()
}

/// Density of golden-rule decay rates e^(−1/(4γT₁))/√(4πγ³T₁).
pub fn decay_rate_density(gamma: f64, t1: f64) -> f64 {
    if gamma <= 0.0 {
        return 0.0;
    }
    (-1.0 / (4.0 * gamma * t1)).exp() / (4.0 * PI * gamma.powi(3) * t1).sqrt()
}

/// ∫ p(γ) e^(−γt) dγ by quadrature.
pub fn decay_rate_laplace(t: f64, t1: f64) -> Result<f64> {
    let scale = 1.0 / t1;
    let est = integrate_to_infinity(
        |u| decay_rate_density(u * scale, t1) * (-u * scale * t).exp() * scale,
        0.0,
        Tolerance::relative(1e-9).with_abs(1e-14),
    )?;
    Ok(est.value)
}

/// Phonon-limited lifetime ratio M·(f_a/f_b)³ from 1/T₁ ∝ M²ω³.
pub fn phonon_ratio(freq_a: f64, freq_b: f64, channel_multiplicity: f64) -> Result<f64> {
    ensure(freq_a > 0.0 && freq_b > 0.0, "frequency", || "both frequencies must be > 0".into())?;
    Ok(channel_multiplicity * (freq_a / freq_b).powi(3))
}

/// κ in 1/s expressed as an ordinary frequency.
pub fn rate_to_hz(kappa: f64) -> f64 {
    kappa / TWO_PI
}
