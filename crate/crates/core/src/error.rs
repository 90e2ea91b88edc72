use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not Hermitian: max asymmetry {max_asymmetry:.3e} exceeds {tol:.1e}")]
    NotHermitian { max_asymmetry: f64, tol: f64 },

    #[error("state is not normalized: |<psi|psi> - 1| = {deviation:.3e} exceeds {tol:.1e}")]
    NotNormalized { deviation: f64, tol: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid density matrix: {0}")]
    InvalidDensity(String),

    #[error("level {level} has projection weight {weight:.3e}; the Lüders state is undefined")]
    DegenerateProjection { level: usize, weight: f64 },

    #[error("level index {level} out of range (decomposition has {levels} levels)")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("eigensolver failed to converge on a {dim}x{dim} matrix")]
    EigenNotConverged { dim: usize },

    #[error("non-finite amplitudes after integration step {step}")]
    NumericBlowup { step: usize },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("integration quality: minimum eigenvalue {min_eigenvalue:.3e} below -{tol:.1e}")]
    IntegrationQuality { min_eigenvalue: f64, tol: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericBlowup { .. }
                | Error::EigenNotConverged { .. }
                | Error::IntegrationQuality { .. }
        )
    }
}
