use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid case: {0}")]
    InvalidCase(String),

    #[error("branch {branch}: nonpositive reactance {value}")]
    NonPositiveReactance { branch: usize, value: f64 },

    #[error("network graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("slack bus: {0}")]
    Slack(String),

    #[error("invalid load profile: {0}")]
    Profile(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("null space is trivial: {0}")]
    NullityZero(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that come from the numerics rather than from the
    /// inputs (singular systems, diverging training runs).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_) | Error::Divergence(_) | Error::NullityZero(_)
        )
    }
}
