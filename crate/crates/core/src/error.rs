use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("coefficient `{which}` is not finite at (t={t}, x={x})")]
    Evaluation { which: &'static str, t: f64, x: f64 },

    #[error("ellipticity violated: |sigma({t}, {x})| = {value} < floor {floor}")]
    Ellipticity { t: f64, x: f64, value: f64, floor: f64 },

    #[error("sigma declared time-only but depends on x at t={t}")]
    SigmaKind { t: f64 },

    #[error("step size {dt} exceeds the stiffness cap {cap}")]
    StepCap { dt: f64, cap: f64 },

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("blow-up at step {step} (t={t}): non-finite state")]
    BlowUp { step: usize, t: f64 },

    #[error("coupling error: {0}")]
    Coupling(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error at line {line}, field `{field}`: {message}")]
    Config { line: usize, field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sweep aborted at alpha={alpha}: {source}")]
    SweepAborted {
        alpha: f64,
        #[source]
        source: Box<Error>,
        partial: Box<crate::ratefit::RateTable>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
