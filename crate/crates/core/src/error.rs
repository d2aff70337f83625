use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel of shape {kernel:?} does not fit image of shape {image:?}")]
    KernelTooLarge {
        kernel: (usize, usize),
        image: (usize, usize),
    },

    #[error("valid region is empty for image {image:?} and kernel {kernel:?}")]
    EmptyValidRegion {
        kernel: (usize, usize),
        image: (usize, usize),
    },

    #[error("grid dimensions must be at least 1x1, got {0}x{1}")]
    EmptyGrid(usize, usize),

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("imaginary residual {residual:e} exceeds tolerance {tolerance:e}")]
    ImaginaryResidualTooLarge { residual: f64, tolerance: f64 },

    #[error("every frequency bin is below the singularity threshold")]
    AllBinsSingular,

    #[error("matrix is singular or ill-conditioned (condition estimate {condition:e})")]
    SingularMatrix { condition: f64 },

    #[error("invalid weight {0}: weights must be finite and nonnegative")]
    InvalidWeight(f64),

    #[error("problem has no terms with positive weight")]
    NoActiveTerms,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("proximal operator returned a non-finite value at iteration {iteration}")]
    ProxFailure { iteration: usize },

    #[error("penalty schedule is not increasing: {from} -> {to}")]
    NonIncreasingBeta { from: f64, to: f64 },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt image file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
