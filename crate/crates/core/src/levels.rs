//! Single-ion and pair level structure.

use crate::error::{ensure, Error, Result};
use crate::material::{HyperfineState, MaterialParams, PairConfig};
use nalgebra::{Matrix4, SymmetricEigen, Vector4};

/// Longitudinal field h = g∥μ_B·B_z + A·I^z + δh as an energy in Hz.
pub fn longitudinal_field(params: &MaterialParams, iz: HyperfineState, b_z_t: f64, dh_hz: f64) -> f64 {
    params.zeeman_hz_per_t() * b_z_t + params.hyperfine_a_hz * iz.i_z() + dh_hz
}

/// Transition energy ΔE = √(Δ² + h²) of one ion, Hz.
pub fn level_energy(params: &MaterialParams, iz: HyperfineState, b_z_t: f64, dh_hz: f64) -> f64 {
    params.delta_hz.hypot(longitudinal_field(params, iz, b_z_t, dh_hz))
}

/// Field at which the applied Zeeman term cancels the hyperfine term, T.
pub fn clock_field(params: &MaterialParams, iz: HyperfineState) -> f64 {
    -params.hyperfine_a_hz * iz.i_z() / params.zeeman_hz_per_t()
}

/// Transverse and longitudinal transition matrix elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixElements {
    pub off: f64,
    pub diag: f64,
}

impl MatrixElements {
    pub fn from_field(delta_hz: f64, h_hz: f64) -> Self {
        if !h_hz.is_finite() {
            return MatrixElements { off: 0.0, diag: 1.0 };
        }
        let e = delta_hz.hypot(h_hz);
        MatrixElements {
            off: delta_hz / e,
            diag: h_hz.abs() / e,
        }
    }
}

pub fn matrix_elements(params: &MaterialParams, iz: HyperfineState, b_z_t: f64, dh_hz: f64) -> MatrixElements {
    MatrixElements::from_field(params.delta_hz, longitudinal_field(params, iz, b_z_t, dh_hz))
}

/// Ising dipolar coupling J₀(1 − 3cos²θ)/r³ between two dopants, Hz.
pub fn dipolar_coupling(params: &MaterialParams, r_m: f64, theta: f64) -> Result<f64> {
    ensure(r_m > 0.0 && r_m.is_finite(), "r", || format!("distance must be > 0, got {r_m}"))?;
    let c = theta.cos();
    Ok(params.j0_hz_m3() * (1.0 - 3.0 * c * c) / r_m.powi(3))
}

/// Pair eigenstate labels in the energy basis of the two ions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairState {
    Ground,
    Antisymmetric,
    Symmetric,
    Doubly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLevels {
    /// Energies of |00⟩, |01−10⟩, |01+10⟩, |11⟩ in Hz.
    pub energies: [f64; 4],
}

impl PairLevels {
    pub fn energy(&self, s: PairState) -> f64 {
        self.energies[s as usize]
    }

    /// The microwave-active transition |00⟩ → |01+10⟩.
    pub fn probed_transition(&self) -> f64 {
        self.energy(PairState::Symmetric) - self.energy(PairState::Ground)
    }
}

/// Diagonalizes the two-ion Hamiltonian
/// Σᵢ ½(Δσˣᵢ + hᵢσᶻᵢ) + (J_pair + J_ex)σᶻ₁σᶻ₂ in the magnetic basis.
///
/// The middle doublet is labelled by its weight on the exchange-antisymmetric
/// state, which stays an exact eigenvector when both ions see the same field.
pub fn pair_levels(params: &MaterialParams, pair: &PairConfig, b_z_t: f64) -> PairLevels {
    let h1 = longitudinal_field(params, pair.i_z_1, b_z_t, 0.0);
    let h2 = longitudinal_field(params, pair.i_z_2, b_z_t, 0.0);
    pair_levels_with_fields(params.delta_hz, h1, h2, pair.coupling_hz())
}

pub fn pair_levels_with_fields(delta: f64, h1: f64, h2: f64, k: f64) -> PairLevels {
    // Basis |s1 s2⟩ with s = ↑, ↓ → index 2·i1 + i2, σᶻ|↑⟩ = +|↑⟩.
    let sz = [1.0, -1.0];
    let mut h = Matrix4::<f64>::zeros();
    for i1 in 0..2 {
        for i2 in 0..2 {
            let a = 2 * i1 + i2;
            h[(a, a)] = 0.5 * (h1 * sz[i1] + h2 * sz[i2]) + k * sz[i1] * sz[i2];
            let b1 = 2 * (1 - i1) + i2;
            let b2 = 2 * i1 + (1 - i2);
            h[(a, b1)] += 0.5 * delta;
            h[(a, b2)] += 0.5 * delta;
        }
    }
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let anti = Vector4::new(0.0, 1.0, -1.0, 0.0) / 2f64.sqrt();
    let weight = |i: usize| eig.eigenvectors.column(i).dot(&anti).powi(2);
    let (m1, m2) = (order[1], order[2]);
    let (anti_idx, sym_idx) = if weight(m1) >= weight(m2) { (m1, m2) } else { (m2, m1) };
    PairLevels {
        energies: [
            eig.eigenvalues[order[0]],
            eig.eigenvalues[anti_idx],
            eig.eigenvalues[sym_idx],
            eig.eigenvalues[order[3]],
        ],
    }
}

/// State of the third ion during a ring-exchange process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThirdIon {
    /// τ = 0.
    Excited,
    /// τ = 1.
    Ground,
}

impl ThirdIon {
    pub fn tau(self) -> u8 {
        match self {
            ThirdIon::Excited => 0,
            ThirdIon::Ground => 1,
        }
    }

    pub fn from_tau(tau: u8) -> Result<Self> {
        match tau {
            0 => Ok(ThirdIon::Excited),
            1 => Ok(ThirdIon::Ground),
            _ => Err(Error::invalid("tau", format!("must be 0 or 1, got {tau}"))),
        }
    }

    fn sign(self) -> f64 {
        1.0 - 2.0 * self.tau() as f64
    }
}

/// Ratio of |denominator| to the largest coupling below which the
/// second-order expression is refused.
pub const RING_GUARD_FACTOR: f64 = 10.0;

/// Second-order shift of a pair transition mediated by a third ion, Hz.
pub fn ring_exchange(
    j13: f64,
    j23: f64,
    delta_pair: f64,
    j_pair: f64,
    delta3: f64,
    third: ThirdIon,
) -> Result<f64> {
    ring_exchange_guarded(j13, j23, delta_pair, j_pair, delta3, third, RING_GUARD_FACTOR)
}

pub fn ring_exchange_guarded(
    j13: f64,
    j23: f64,
    delta_pair: f64,
    j_pair: f64,
    delta3: f64,
    third: ThirdIon,
    guard: f64,
) -> Result<f64> {
    let s = third.sign();
    let den = (delta_pair - s * j_pair) - delta3;
    if j13 == 0.0 || j23 == 0.0 || den.is_infinite() {
        return Ok(0.0);
    }
    let threshold = guard * j13.abs().max(j23.abs());
    if !(den.abs() >= threshold) {
        return Err(Error::NearResonance {
            denominator: den,
            threshold,
        });
    }
    Ok(s * j13 * j23 / (2.0 * den))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::units::MT;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> MaterialParams {
        Config::default().material().unwrap()
    }

    #[test]
    fn clock_fields() {
        let p = params();
        assert_relative_eq!(clock_field(&p, HyperfineState::M3Half) / MT, 38.25, epsilon = 0.1);
        assert_relative_eq!(clock_field(&p, HyperfineState::M1Half) / MT, 12.75, epsilon = 0.05);
        let b = clock_field(&p, HyperfineState::M3Half);
        assert_relative_eq!(level_energy(&p, HyperfineState::M3Half, b, 0.0), p.delta_hz, max_relative = 1e-12);
    }

    #[test]
    fn slope_vanishes_at_clock_field() {
        let p = params();
        for iz in HyperfineState::ALL {
            let b = clock_field(&p, iz);
            let step = 10e-6;
            let d = (level_energy(&p, iz, b + step, 0.0) - level_energy(&p, iz, b - step, 0.0)) / (2.0 * step);
            assert!(d.abs() < 1e-3 * p.zeeman_hz_per_t(), "{iz}: {d}");
        }
    }

    #[test]
    fn zero_field_zero_hyperfine() {
        let mut p = params();
        p.hyperfine_a_hz = 0.0;
        assert_eq!(level_energy(&p, HyperfineState::P3Half, 0.0, 0.0), p.delta_hz);
    }

    #[test]
    fn magnetized_matrix_element() {
        let p = params();
        let b = 38e-3;
        let h = p.zeeman_hz_per_t() * b + p.hyperfine_a_hz * 1.5;
        let m = matrix_elements(&p, HyperfineState::P3Half, b, 0.0);
        let e = level_energy(&p, HyperfineState::P3Half, b, 0.0);
        assert_relative_eq!(m.diag, h / e, max_relative = 1e-14);
        let inf = MatrixElements::from_field(p.delta_hz, f64::INFINITY);
        assert_eq!((inf.off, inf.diag), (0.0, 1.0));
        let clock = MatrixElements::from_field(p.delta_hz, 0.0);
        assert_eq!((clock.off, clock.diag), (1.0, 0.0));
    }

    #[test]
    fn dipolar_laws() {
        let p = params();
        let magic = (1.0 / 3f64.sqrt()).acos();
        assert!(dipolar_coupling(&p, 1e-9, magic).unwrap().abs() < 1e-12 * p.j0_hz_m3() / 1e-27);
        let a = dipolar_coupling(&p, 1e-9, 0.3).unwrap();
        let b = dipolar_coupling(&p, 2e-9, 0.3).unwrap();
        assert_relative_eq!(a / b, 8.0, max_relative = 1e-12);
        assert!(dipolar_coupling(&p, 0.0, 0.3).is_err());
    }

    #[test]
    fn noninteracting_pair_is_degenerate() {
        let p = params();
        let pair = PairConfig {
            j_pair_hz: 0.0,
            j_ex_hz: 0.0,
            i_z_1: HyperfineState::M3Half,
            i_z_2: HyperfineState::M3Half,
        };
        let b = clock_field(&p, HyperfineState::M3Half);
        let l = pair_levels(&p, &pair, b);
        assert_relative_eq!(l.energies[1], l.energies[2], epsilon = 1.0);
        assert_relative_eq!(l.probed_transition(), p.delta_hz, max_relative = 1e-12);
    }

    #[test]
    fn nnn_pair_transition_and_moment() {
        let p = params();
        let pair = PairConfig::from_detuning(&p, 7.61e9, HyperfineState::M3Half).unwrap();
        let b = clock_field(&p, HyperfineState::M3Half);
        let l = pair_levels(&p, &pair, b);
        assert_relative_eq!(l.probed_transition(), 35.41e9, max_relative = 1e-9);
        // First-order transition estimate Δ + J_pair + J_ex.
        let k = pair.coupling_hz();
        assert!((l.probed_transition() - (p.delta_hz + k)).abs() < k * k / p.delta_hz);
        let step = 1e-6;
        let up = pair_levels(&p, &pair, b + step).energy(PairState::Symmetric);
        let dn = pair_levels(&p, &pair, b - step).energy(PairState::Symmetric);
        let moment = (up - dn) / (2.0 * step) / p.zeeman_hz_per_t();
        assert!(moment.abs() < 1e-6, "{moment}");
    }

    #[test]
    fn ring_exchange_limits_and_guard() {
        assert_eq!(ring_exchange(0.0, 1.0, 1e4, 100.0, 0.0, ThirdIon::Ground).unwrap(), 0.0);
        assert_eq!(ring_exchange(1.0, 1.0, 1e4, 100.0, f64::INFINITY, ThirdIon::Ground).unwrap(), 0.0);
        let v = ring_exchange(1.0, 1.0, 1e4, 100.0, 1e4, ThirdIon::Excited).unwrap();
        assert_relative_eq!(v, 1.0 / (2.0 * -100.0));
        match ring_exchange(5.0, 1.0, 1e4, 20.0, 1e4, ThirdIon::Excited) {
            Err(Error::NearResonance { denominator, threshold }) => {
                assert_relative_eq!(denominator, -20.0);
                assert_relative_eq!(threshold, 50.0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(ThirdIon::from_tau(2).is_err());
    }

    #[test]
    fn ring_exchange_r6() {
        let p = params();
        let (t1, t2) = (0.4, 1.1);
        let v = |r: f64| {
            let j13 = dipolar_coupling(&p, r, t1).unwrap();
            let j23 = dipolar_coupling(&p, r * 1.3, t2).unwrap();
            ring_exchange(j13, j23, 30e9, 7e9, 27.8e9, ThirdIon::Ground).unwrap()
        };
        assert_relative_eq!(v(4e-9) / v(2e-9), 1.0 / 64.0, max_relative = 1e-12);
    }

    fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        while b - a > tol {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn clock_field_is_the_minimizer() {
        let p = params();
        for iz in HyperfineState::ALL {
            let b0 = clock_field(&p, iz);
            let found = golden_min(|b| level_energy(&p, iz, b, 0.0), b0 - 0.05, b0 + 0.05, 1e-7);
            assert!((found - b0).abs() < 1e-6, "{iz}: {found} vs {b0}");
        }
    }

    proptest! {
        #[test]
        fn energy_bounded_below_by_gap(b in -0.2f64..0.2, dh in -2e9f64..2e9, k in 0usize..4) {
            let p = params();
            let iz = HyperfineState::ALL[k];
            let e = level_energy(&p, iz, b, dh);
            prop_assert!(e >= p.delta_hz);
            let m = matrix_elements(&p, iz, b, dh);
            prop_assert!((m.off * m.off + m.diag * m.diag - 1.0).abs() < 1e-12);
        }
    }
}
