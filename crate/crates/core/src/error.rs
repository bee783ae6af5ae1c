use thiserror::Error;

/// Errors raised by the numerical kernels, system algebra and synthesis driver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("matrix is singular or numerically singular (condition estimate {0:.3e})")]
    Singular(f64),
    #[error("ill-posed linear fractional interconnection{}", .index.map(|j| format!(" at grid point {j}")).unwrap_or_default())]
    IllPosed { index: Option<usize> },
    #[error("system is not stable (spectral abscissa {0:.3e})")]
    Unstable(f64),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("stabilization failed (best max spectral abscissa {0:.3e})")]
    StabilizationFailed(f64),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
