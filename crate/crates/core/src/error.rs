use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: expected rank {expected}, got rank {got}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("conv2d: kernel size {0} is not supported (expected 1, 3, 5 or 7)")]
    InvalidKernel(usize),

    #[error("unknown primitive kind `{0}`")]
    UnknownOp(String),

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(alloc::vec::Vec<usize>),

    #[error("backward: tape already consumed; run a new forward pass first")]
    TapeConsumed,

    #[error("normalized_laplacian: negative adjacency entry {value} at ({row}, {col})")]
    NegativeAdjacency { row: usize, col: usize, value: f64 },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("loss: label value {value} at index {index} is not binary")]
    NonBinaryLabel { index: usize, value: f64 },

    #[error("ground truth has no foreground pixels")]
    EmptyForeground,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("adam: {0}")]
    Optimizer(String),
}

#[macro_export]
#[doc(hidden)]
macro_rules! shape_err {
    ($op:expr, $($arg:tt)*) => {
        $crate::Error::ShapeMismatch { op: $op, detail: alloc::format!($($arg)*) }
    };
}
