use thiserror::Error;

/// Failure modes shared by every module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("ring-exchange denominator {denominator:.4e} Hz is inside the near-resonance guard {threshold:.4e} Hz")]
    NearResonance { denominator: f64, threshold: f64 },

    #[error("quadrature did not reach tolerance: estimate {estimate:.6e}, error bound {error:.3e}")]
    Quadrature { estimate: f64, error: f64 },

    #[error("fit did not converge: {0}")]
    NonConvergence(String),

    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error("{path}: line {line}{}: {message}", column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        path: String,
        line: u64,
        column: Option<u64>,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }

    /// True for failures of a numerical procedure rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Quadrature { .. } | Error::NonConvergence(_) | Error::IllConditioned(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, field: &'static str, reason: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(field, reason()))
    }
}
