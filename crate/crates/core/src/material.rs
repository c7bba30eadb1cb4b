//! Domain types describing one doped sample.

use crate::error::{ensure, Error, Result};
use crate::units;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

/// Nuclear spin projection of a dopant ion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HyperfineState {
    #[serde(rename = "-3/2")]
    M3Half,
    #[serde(rename = "-1/2")]
    M1Half,
    #[serde(rename = "+1/2")]
    P1Half,
    #[serde(rename = "+3/2")]
    P3Half,
}

impl HyperfineState {
    pub const ALL: [HyperfineState; 4] = [
        HyperfineState::M3Half,
        HyperfineState::M1Half,
        HyperfineState::P1Half,
        HyperfineState::P3Half,
    ];

    pub fn i_z(self) -> f64 {
        match self {
            HyperfineState::M3Half => -1.5,
            HyperfineState::M1Half => -0.5,
            HyperfineState::P1Half => 0.5,
            HyperfineState::P3Half => 1.5,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_i_z(i_z: f64) -> Result<Self> {
        HyperfineState::ALL
            .into_iter()
            .find(|s| (s.i_z() - i_z).abs() < 1e-9)
            .ok_or_else(|| Error::invalid("i_z", format!("{i_z} is not one of -3/2, -1/2, +1/2, +3/2")))
    }
}

impl fmt::Display for HyperfineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HyperfineState::M3Half => "-3/2",
            HyperfineState::M1Half => "-1/2",
            HyperfineState::P1Half => "+1/2",
            HyperfineState::P3Half => "+3/2",
        })
    }
}

impl std::str::FromStr for HyperfineState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let v = match t {
            "-3/2" => -1.5,
            "-1/2" => -0.5,
            "+1/2" | "1/2" => 0.5,
            "+3/2" | "3/2" => 1.5,
            _ => t
                .parse::<f64>()
                .map_err(|_| Error::invalid("i_z", format!("cannot parse {s:?}")))?,
        };
        HyperfineState::from_i_z(v)
    }
}

/// Fundamental constants, kept configurable so a sample file pins its own values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub planck_j_s: f64,
    pub bohr_magneton_j_per_t: f64,
    pub nuclear_magneton_j_per_t: f64,
    pub vacuum_permeability_h_per_m: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Constants {
            planck_j_s: units::PLANCK,
            bohr_magneton_j_per_t: units::BOHR_MAGNETON,
            nuclear_magneton_j_per_t: units::NUCLEAR_MAGNETON,
            vacuum_permeability_h_per_m: units::VACUUM_PERMEABILITY,
        }
    }
}

/// Physical configuration of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Crystal-field gap Δ, Hz.
    pub delta_hz: f64,
    /// Ising g-factor g∥.
    pub g_par: f64,
    /// Hyperfine constant A, Hz.
    pub hyperfine_a_hz: f64,
    pub lattice_a_m: f64,
    pub lattice_c_m: f64,
    pub ions_per_cell: u32,
    /// Dopant fraction x.
    pub dopant_fraction: f64,
    pub fluorine_g: f64,
    pub constants: Constants,
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        ensure(finite_pos(self.delta_hz), "delta_hz", || format!("must be > 0, got {}", self.delta_hz))?;
        ensure(finite_pos(self.g_par), "g_par", || format!("must be > 0, got {}", self.g_par))?;
        ensure(self.hyperfine_a_hz.is_finite(), "hyperfine_a_hz", || "must be finite".into())?;
        ensure(finite_pos(self.lattice_a_m), "lattice_a_m", || "must be > 0".into())?;
        ensure(finite_pos(self.lattice_c_m), "lattice_c_m", || "must be > 0".into())?;
        ensure(self.ions_per_cell > 0, "ions_per_cell", || "must be > 0".into())?;
        ensure(
            self.dopant_fraction > 0.0 && self.dopant_fraction < 1.0,
            "dopant_fraction",
            || format!("must lie in (0, 1), got {}", self.dopant_fraction),
        )?;
        ensure(self.fluorine_g.is_finite(), "fluorine_g", || "must be finite".into())?;
        let c = &self.constants;
        for (v, name) in [
            (c.planck_j_s, "planck_j_s"),
            (c.bohr_magneton_j_per_t, "bohr_magneton_j_per_t"),
            (c.nuclear_magneton_j_per_t, "nuclear_magneton_j_per_t"),
            (c.vacuum_permeability_h_per_m, "vacuum_permeability_h_per_m"),
        ] {
            ensure(finite_pos(v), name, || format!("must be > 0, got {v}"))?;
        }
        Ok(())
    }

    pub fn with_fraction(&self, x: f64) -> Self {
        MaterialParams {
            dopant_fraction: x,
            ..self.clone()
        }
    }

    /// g∥μ_B/h in Hz per tesla.
    pub fn zeeman_hz_per_t(&self) -> f64 {
        self.g_par * self.constants.bohr_magneton_j_per_t / self.constants.planck_j_s
    }

    /// Fluorine nuclear Zeeman frequency g_F μ_N B/h per tesla.
    pub fn fluorine_hz_per_t(&self) -> f64 {
        self.fluorine_g * self.constants.nuclear_magneton_j_per_t / self.constants.planck_j_s
    }

    /// Dipolar constant J₀ = μ₀(μ_B g∥/2)²/(4π), as a frequency times m³.
    pub fn j0_hz_m3(&self) -> f64 {
        let c = &self.constants;
        let m = 0.5 * self.g_par * c.bohr_magneton_j_per_t;
        c.vacuum_permeability_h_per_m * m * m / (4.0 * PI) / c.planck_j_s
    }

    pub fn cell_volume_m3(&self) -> f64 {
        self.lattice_a_m * self.lattice_a_m * self.lattice_c_m
    }

    /// Total dopant density.
    pub fn dopant_density(&self) -> f64 {
        self.ions_per_cell as f64 * self.dopant_fraction / self.cell_volume_m3()
    }

    /// Density of dopants in one hyperfine species.
    pub fn species_density(&self) -> f64 {
        self.dopant_density() / HyperfineState::ALL.len() as f64
    }
}

/// One dopant ion in a sampled configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinSite {
    /// Position in lattice units (a, a, c).
    pub position: [f64; 3],
    pub i_z: HyperfineState,
    /// Crystal-field shift δΔ, Hz.
    pub cf_shift_hz: f64,
    /// Longitudinal internal field δh expressed as an energy, Hz.
    pub local_field_hz: f64,
}

/// A strongly coupled dopant pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub j_pair_hz: f64,
    pub j_ex_hz: f64,
    pub i_z_1: HyperfineState,
    pub i_z_2: HyperfineState,
}

impl PairConfig {
    pub fn coupling_hz(&self) -> f64 {
        self.j_pair_hz + self.j_ex_hz
    }

    /// Clock-field pair whose probed transition sits `detuning_hz` above Δ.
    ///
    /// Only the sum J_pair + J_ex is fixed by the line position; it is stored
    /// in `j_pair_hz` with `j_ex_hz = 0`.
    pub fn from_detuning(params: &MaterialParams, detuning_hz: f64, i_z: HyperfineState) -> Result<Self> {
        // Probed line at the clock field: K + √(Δ² + K²) = Δ + δ.
        let d = params.delta_hz;
        let target = d + detuning_hz;
        ensure(target > 0.0, "detuning_hz", || "transition must stay positive".into())?;
        let k = (target * target - d * d) / (2.0 * target);
        Ok(PairConfig {
            j_pair_hz: k,
            j_ex_hz: 0.0,
            i_z_1: i_z,
            i_z_2: i_z,
        })
    }
}

/// Dipole-coupled fluorine shells around a dopant site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluorineGeometry {
    pub nn: Vec<[f64; 3]>,
    pub nnn: Vec<[f64; 3]>,
}

/// Geometric parts of the Ising and transverse dipolar couplings of one site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShellGeometry {
    /// (1 − 3cos²θ)/r³ averaged over the shell, m⁻³.
    pub zz_per_m3: f64,
    /// |3 sinθ cosθ|/r³ averaged over the shell, m⁻³.
    pub zx_per_m3: f64,
    pub sites: usize,
}

impl ShellGeometry {
    pub fn from_vectors(v: &[[f64; 3]]) -> Self {
        let mut zz = 0.0;
        let mut zx = 0.0;
        for d in v {
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let ct = d[2] / r;
            let st = (1.0 - ct * ct).max(0.0).sqrt();
            zz += (1.0 - 3.0 * ct * ct) / r.powi(3);
            zx += (3.0 * st * ct).abs() / r.powi(3);
        }
        let n = v.len().max(1) as f64;
        ShellGeometry {
            zz_per_m3: zz / n,
            zx_per_m3: zx / n,
            sites: v.len(),
        }
    }
}

impl FluorineGeometry {
    pub fn nn_shell(&self) -> ShellGeometry {
        ShellGeometry::from_vectors(&self.nn)
    }
    pub fn nnn_shell(&self) -> ShellGeometry {
        ShellGeometry::from_vectors(&self.nnn)
    }

    /// Full-moment dopant–fluorine coupling (μ₀/4π)·g∥μ_B·g_Fμ_N/h per unit geometry factor.
    pub fn coupling_constant_hz_m3(params: &MaterialParams) -> f64 {
        let c = &params.constants;
        c.vacuum_permeability_h_per_m / (4.0 * PI)
            * params.g_par
            * c.bohr_magneton_j_per_t
            * params.fluorine_g
            * c.nuclear_magneton_j_per_t
            / c.planck_j_s
    }
}
