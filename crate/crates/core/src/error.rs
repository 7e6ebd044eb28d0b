use std::path::PathBuf;

/// Errors raised anywhere in the synthesis engine.
#[derive(Debug, thiserror::Error)]
pub enum DpmsError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("value {value} is outside the support of {dist}")]
    OutOfSupport { dist: &'static str, value: f64 },
    #[error("no closed-form KL divergence from {q} to {p}")]
    FamilyMismatch { q: &'static str, p: &'static str },
    #[error("objective is not deterministic: {first} then {second}")]
    Nondeterministic { first: f64, second: f64 },
    #[error("label group {0} has no members")]
    EmptyGroup(String),
    #[error("{clamped} of {total} points fell outside the property box")]
    OutOfBox { clamped: usize, total: usize },
    #[error("unknown parameter block `{0}`")]
    UnknownBlock(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("optimization diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DpmsError>;

impl DpmsError {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        DpmsError::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DpmsError::Io {
            path: path.into(),
            source,
        }
    }
}
