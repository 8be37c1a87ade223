use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("{path}: expected {expected}, found {found}")]
    Dimension {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: entries sum to {sum} (expected 1)")]
    Normalization { path: String, sum: f64 },
    #[error("zero degree node at index {0}")]
    ZeroDegree(usize),
    #[error("non-positive degree {value} at index {index}")]
    NegativeDegree { index: usize, value: f64 },
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("rank deficient: smallest singular value {smallest:e} against largest {largest:e}")]
    RankDeficient { smallest: f64, largest: f64 },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("negative entry {value:e} at ({row}, {col}) under a square root")]
    Domain { row: usize, col: usize, value: f64 },
    #[error("training diverged at step {step}: loss {loss:e}")]
    Diverged { step: usize, loss: f64 },
    #[error("{what}: size {size} exceeds the cap of {cap}")]
    TooLarge { what: String, size: usize, cap: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn dimension(path: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            path: path.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Process exit code: 1 for bad input, 2 for numerical trouble, 3 for a
    /// failed verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid { .. }
            | Error::Dimension { .. }
            | Error::Normalization { .. }
            | Error::TooLarge { .. }
            | Error::Io(_)
            | Error::Json(_) => 1,
            Error::Verification(_) => 3,
            _ => 2,
        }
    }
}
