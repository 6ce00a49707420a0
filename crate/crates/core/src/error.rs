use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("time {t} outside schedule domain [{min}, {max}]")]
    OutsideDomain { t: f64, min: f64, max: f64 },

    #[error("sigma vanishes at t = {t}; half-log-SNR is infinite there")]
    InfiniteLambda { t: f64 },

    #[error("half-log-SNR {lambda} outside the image of the schedule")]
    LambdaOutOfRange { lambda: f64 },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid grid request: {0}")]
    InvalidGrid(String),

    #[error("grid invariant violated at index {index}: {what}")]
    GridViolation { index: usize, what: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate predictor evaluation: {0}")]
    Degenerate(String),

    #[error("insufficient history: need {needed} entries, have {have}")]
    InsufficientHistory { needed: usize, have: usize },

    #[error("singular coefficient system: {0}")]
    Singular(String),

    #[error("fixed-point iteration did not converge in {iters} iterations (residual {residual:e})")]
    PicardDiverged { iters: usize, residual: f64 },

    #[error("reference integration reached {achieved:e}, above the requested {requested:e}")]
    ReferenceTolerance { achieved: f64, requested: f64 },

    #[error("step index {index} out of range 1..={m}")]
    InvalidIndex { index: usize, m: usize },

    #[error("invalid sampler specification: {0}")]
    InvalidSampler(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("too few usable points for slope fit: {usable} (need at least 4)")]
    TooFewPoints { usable: usize },

    #[error("invalid experiment plan: {0}")]
    InvalidPlan(String),

    #[error("{0}")]
    Io(String),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
