use thiserror::Error;

/// Errors produced by the task model, data pipeline, and learner.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// A JSONL line could not be decoded.
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    /// A record decoded but broke one of the data invariants.
    #[error("{}validation error: {field}: {rule}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Validation {
        line: Option<usize>,
        field: String,
        rule: String,
    },

    /// The optimizer produced a non-finite objective.
    #[error("training diverged at iteration {iteration}; last finite weights {last_finite:?}")]
    Diverged {
        iteration: usize,
        last_finite: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn invalid(line: Option<usize>, field: &str, rule: impl Into<String>) -> Self {
        Error::Validation {
            line,
            field: field.to_string(),
            rule: rule.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
