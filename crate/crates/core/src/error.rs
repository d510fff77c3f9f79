use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("modality mask selects no modality")]
    EmptyModalityMask,
    #[error("modality {0} is not configured for this model")]
    ModalityNotConfigured(&'static str),
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("particle depletion at step {step}: every particle has zero likelihood")]
    ParticleDepletion { step: usize },
    #[error("covariance not positive definite at step {step}: {source}")]
    Covariance {
        step: usize,
        #[source]
        source: DiffError,
    },
    #[error("training diverged in {phase} at step {step}: {detail}")]
    Divergence {
        phase: String,
        step: usize,
        detail: String,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FilterError>;
