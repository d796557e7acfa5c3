use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    /// The ID/OOD scorer does not separate the two populations well enough
    /// for a ratio to be identified.
    #[error("degenerate scorer: {0}")]
    DegenerateScorer(String),

    /// A sample whose extended likelihood vanishes under the current iterate.
    #[error("degenerate sample at index {index}: all reweighted likelihood terms are zero")]
    DegenerateSample { index: usize },

    #[error("ambiguous stationary point: the objective is flat over several simplex points")]
    AmbiguousStationary,

    #[error("ill-conditioned linear system (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Format {
            what: what.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by I/O or malformed files and configs, as
    /// opposed to numerically degenerate inputs.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Format { .. })
    }
}
