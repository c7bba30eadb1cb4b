//! Decoherence model of dense dipolar two-level-system networks: level
//! structure, fluctuation rates, dephasing kernels, echo composition, a
//! Monte Carlo oracle and a global fitting pipeline for echo traces.

pub mod config;
pub mod echo;
pub mod error;
pub mod fit;
pub mod kernels;
pub mod levels;
pub mod material;
pub mod oracle;
pub mod quad;
pub mod rates;
pub mod trace;
pub mod units;

pub use config::Config;
pub use error::{Error, Result};
pub use material::{HyperfineState, MaterialParams};
