use thiserror::Error;

pub type Result<T> = std::result::Result<T, PaseError>;

#[derive(Debug, Error)]
pub enum PaseError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error(
        "{context}: operator is not positive definite (column/pivot {index}, value {value:e})"
    )]
    Indefinite {
        context: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{context}: singular matrix (pivot {index})")]
    Singular { context: &'static str, index: usize },

    #[error("shift {theta} is too close to an eigenvalue of the pencil; perturb the shift")]
    ShiftProximity { theta: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("spaces are not nested: {0}")]
    Nesting(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("convergence criterion undefined: eigenvalue of column {column} is zero")]
    CriterionUndefined { column: usize },

    #[error(
        "batch {batch} failed to capture its target eigenpairs (minimum component {score:.3e})"
    )]
    CaptureFailure { batch: usize, score: f64 },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix market parse error at line {line}: {message}")]
    MatrixMarket { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PaseError {
    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        PaseError::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}
