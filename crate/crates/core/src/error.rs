use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parametric instability: A- - A+ + gamma_m = {margin:.6e} 1/s is not positive")]
    ParametricInstability { margin: f64 },

    #[error("step too large: dt = {dt_us} us gives stiffness product {product:.4} >= 0.1; use dt <= {suggested_us:.4e} us")]
    StepTooLarge {
        dt_us: f64,
        product: f64,
        suggested_us: f64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("grid too coarse: step {step_us} us exceeds {required_us:.4e} us (0.2/kappa_f)")]
    GridTooCoarse { step_us: f64, required_us: f64 },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("insufficient counts in window centered at {center_us} us (tau {tau_us} us)")]
    InsufficientCounts { center_us: f64, tau_us: f64 },

    #[error("undefined Cauchy-Schwarz parameter: {0}")]
    UndefinedR(String),

    #[error("bootstrap degenerate: {degenerate} of {total} resamples gave undefined R")]
    DegenerateBootstrap { degenerate: usize, total: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
