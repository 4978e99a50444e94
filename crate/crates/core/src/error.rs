use thiserror::Error;

#[derive(Debug, Error)]
pub enum RigError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("singular system in {context}")]
    Singular { context: &'static str },

    #[error("underdetermined fit: {} parameter direction(s) unconstrained (first: {:?})", null_params.len(), &null_params[..null_params.len().min(8)])]
    Underdetermined { null_params: Vec<usize> },

    #[error("non-finite value in {context} (theta = {theta:?})")]
    NonFinite {
        context: &'static str,
        theta: Vec<f64>,
    },

    #[error("tracker failure: {0}")]
    Tracker(String),

    #[error("tracker capability missing: {0}")]
    Unsupported(&'static str),

    #[error("merge conflict: parameters {params:?} updated by more than one expression")]
    MergeConflict { params: Vec<usize> },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<RigError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, RigError>;

impl RigError {
    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        RigError::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub fn with_context(self, context: impl Into<String>) -> Self {
        RigError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(RigError::Dimension {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
