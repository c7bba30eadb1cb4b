//! Physical constants (CODATA 2018) and unit helpers.
//!
//! Energies are carried as ordinary frequencies E/h in Hz. Anything that
//! multiplies a time inside an exponent or a phase needs the angular value,
//! obtained with [`angular`].

use std::f64::consts::PI;

pub const PLANCK: f64 = 6.626_070_15e-34;
pub const BOHR_MAGNETON: f64 = 9.274_010_078_3e-24;
pub const NUCLEAR_MAGNETON: f64 = 5.050_783_746_1e-27;
pub const VACUUM_PERMEABILITY: f64 = 1.256_637_062_12e-6;

pub const TWO_PI: f64 = 2.0 * PI;

/// 2√(2 ln 2), the Gaussian FWHM in units of the standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Frequency in Hz to angular frequency in rad/s.
#[inline]
pub fn angular(f_hz: f64) -> f64 {
    TWO_PI * f_hz
}

#[inline]
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / FWHM_PER_SIGMA
}

pub const MHZ: f64 = 1e6;
pub const GHZ: f64 = 1e9;
pub const MT: f64 = 1e-3;
pub const US: f64 = 1e-6;
pub const ANGSTROM: f64 = 1e-10;
