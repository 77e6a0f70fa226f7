use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A non-finite value appeared. `context` names the primitive, step or
    /// position where it was first seen.
    #[error("numerical failure in {context}")]
    NumericalFailure { context: String },

    /// |P_t| fell below the relative-form floor at a scored position.
    #[error("degenerate token at position {position}: |log p| = {value:e} below floor")]
    DegenerateToken { position: usize, value: f64 },

    #[error("degenerate sampling weights: {0}")]
    DegenerateWeight(String),

    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::ContractViolation(msg.into())
    }

    pub(crate) fn numerical(context: impl Into<String>) -> Self {
        Error::NumericalFailure {
            context: context.into(),
        }
    }

    /// Wrap an error with the id of the sample it came from.
    pub fn for_sample(self, sample_id: impl Into<String>) -> Self {
        Error::Sample {
            sample_id: sample_id.into(),
            source: Box::new(self),
        }
    }

    /// Strips `Sample` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Sample { source, .. } => source.root(),
            other => other,
        }
    }
}
