//! Crate-wide error type.

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by matrix kernels, the tape, the model, and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("singular matrix: pivot {pivot:e} at elimination step {index} is below threshold {threshold:e}")]
    Singular {
        index: usize,
        pivot: f64,
        threshold: f64,
    },

    #[error("non-finite entry {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("invalid matrix dimensions {rows}x{cols}")]
    InvalidDimensions { rows: usize, cols: usize },

    #[error("data length {got} does not match {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        got: usize,
    },

    #[error("matrix is not skew-symmetric: |S + S^T| reaches {max_abs:e} at ({row}, {col})")]
    NotSkew {
        row: usize,
        col: usize,
        max_abs: f64,
    },

    #[error("matrix is not orthogonal: ||W^T W - E||_F = {error:e} exceeds tolerance {tolerance:e}")]
    NotOrthogonal { error: f64, tolerance: f64 },

    #[error("direction is not tangent: |W^T H + (W^T H)^T| reaches {error:e}, tolerance {tolerance:e}")]
    NotTangent { error: f64, tolerance: f64 },

    #[error("loss node must be 1x1, got {rows}x{cols}")]
    LossNotScalar { rows: usize, cols: usize },

    #[error("label {label} out of range for {classes} classes (sample {sample})")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        classes: usize,
    },

    #[error("config error for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: bad IDX header byte {byte:#04x} at offset {offset}: {message}")]
    IdxFormat {
        path: String,
        offset: usize,
        byte: u8,
        message: String,
    },

    #[error("{path}: IDX payload truncated: expected {expected} bytes after the header, got {got}")]
    IdxLength {
        path: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}
