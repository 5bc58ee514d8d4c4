use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite energy for example {index}")]
    NonFiniteEnergy { index: usize },

    #[error("langevin chain produced a non-finite iterate at step {step}")]
    ChainDiverged { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter layout mismatch: {0}")]
    ParameterMismatch(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("failed to load images from {path}:\n  {}", .failures.join("\n  "))]
    ImageLoad {
        path: PathBuf,
        failures: Vec<String>,
    },

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
