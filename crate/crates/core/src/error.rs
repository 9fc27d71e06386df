use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model parameter violates one of its invariants.
    #[error("invalid `{field}`: {message}")]
    InvalidParams { field: &'static str, message: String },

    #[error("transport problem is unbalanced: |sum(b) - sum(nu)| = {gap:e}")]
    Unbalanced { gap: f64 },

    /// An argument fell outside the domain of a numerical routine.
    #[error("{what}: argument {value} outside domain [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("no observations in the neighbourhood of m = {m}")]
    NoData { m: usize },

    #[error("phase {phase}: fluid horizon exceeded ({detail})")]
    HorizonExceeded { phase: usize, detail: String },

    #[error("numerical failure in {context}")]
    Numerical { context: String },

    #[error("trajectories do not share a sample grid")]
    MismatchedGrid,

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParams {
            field,
            message: message.into(),
        }
    }

    pub(crate) fn numerical(context: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
        }
    }
}
