use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numeric failure at step {step}: {detail}")]
    NumericFailure { step: usize, detail: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("solver stagnated; residual history {history:?}")]
    Stagnation { history: Vec<f64> },

    #[error("loss of hyperbolicity at sample {sample}: {detail}")]
    LossOfHyperbolicity { sample: usize, detail: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("noise-dominated: fewer than {needed} usable points above 3x noise floor {noise_floor:.3e}")]
    NoiseDominated { needed: usize, noise_floor: f64 },

    #[error("at t = {t}: {source}")]
    AtParameter {
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("at cell {cell}: {source}")]
    AtCell {
        cell: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_t(self, t: f64) -> Self {
        Error::AtParameter {
            t,
            source: Box::new(self),
        }
    }
}
