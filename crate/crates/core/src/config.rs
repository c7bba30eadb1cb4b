//! Sample configuration files.
//!
//! Keys carry their SI unit as a suffix (`delta_hz`, `a_m`, ...). A complete
//! default for the terbium-doped LiYF₄ host ships inside the crate.

use crate::error::{Error, Result};
use crate::material::{Constants, FluorineGeometry, MaterialParams};
use crate::rates::{DisorderModel, RateParams};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_TOML: &str = include_str!("../data/liyf4_tb.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSection {
    pub delta_hz: f64,
    pub g_par: f64,
    pub hyperfine_a_hz: f64,
    pub dopant_fraction: f64,
    pub fluorine_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub a_m: f64,
    pub c_m: f64,
    pub ions_per_cell: u32,
    pub fluorine_nn_m: Vec<[f64; 3]>,
    pub fluorine_nnn_m: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisorderSection {
    pub w_delta_hz: f64,
    pub w_delta_reference_fraction: f64,
    pub dh_fwhm_t: [f64; 4],
    pub dh_typical_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsSection {
    pub nnn_detuning_hz: f64,
    pub nnn_moment: f64,
    pub loose_detuning_hz: f64,
    pub loose_moment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluorineSection {
    pub kappa_hz: f64,
    pub nnn_site_moment: f64,
    pub t_f_s: f64,
    pub beta_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub material: MaterialSection,
    pub lattice: LatticeSection,
    #[serde(default)]
    pub constants: Constants,
    pub disorder: DisorderSection,
    pub rates: RateParams,
    pub pairs: PairsSection,
    pub fluorine: FluorineSection,
}

impl Default for Config {
    fn default() -> Self {
        Config::parse(DEFAULT_TOML, "<builtin>").expect("shipped config parses")
    }
}

impl Config {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        toml::from_str::<Config>(text).map_err(|e| {
            let (line, column) = match e.span() {
                Some(span) => line_col(text, span.start),
                None => (0, None),
            };
            Error::Parse {
                path: path.to_string(),
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = Config::parse(&text, &path.display().to_string())?;
        cfg.material().map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn material(&self) -> Result<MaterialParams> {
        let p = MaterialParams {
            delta_hz: self.material.delta_hz,
            g_par: self.material.g_par,
            hyperfine_a_hz: self.material.hyperfine_a_hz,
            lattice_a_m: self.lattice.a_m,
            lattice_c_m: self.lattice.c_m,
            ions_per_cell: self.lattice.ions_per_cell,
            dopant_fraction: self.material.dopant_fraction,
            fluorine_g: self.material.fluorine_g,
            constants: self.constants,
        };
        p.validate()?;
        Ok(p)
    }

    /// Disorder at the configured dopant fraction, W_Δ scaled ∝ x.
    pub fn disorder(&self) -> DisorderModel {
        self.disorder_at(self.material.dopant_fraction)
    }

    pub fn disorder_at(&self, x: f64) -> DisorderModel {
        let d = &self.disorder;
        DisorderModel {
            w_delta_hz: d.w_delta_hz * x / d.w_delta_reference_fraction,
            dh_fwhm_t: d.dh_fwhm_t,
            dh_typical_t: d.dh_typical_t,
        }
    }

    pub fn rate_params(&self) -> RateParams {
        self.rates
    }

    pub fn fluorine_geometry(&self) -> FluorineGeometry {
        FluorineGeometry {
            nn: self.lattice.fluorine_nn_m.clone(),
            nnn: self.lattice.fluorine_nnn_m.clone(),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (u64, Option<u64>) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() as u64 + 1;
    let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) as u64 + 1;
    (line, Some(col))
}
