use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("tensor dims {dims:?} imply {expected} values, got {actual}")]
    DataLength {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor dims must be positive, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("node {node} ({op}): dim mismatch: {detail}")]
    DimMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("output `{0}` is not defined on the graph")]
    UnknownOutput(String),
    #[error("output `{name}` must be scalar with dims [1], got {dims:?}")]
    NonScalarOutput { name: String, dims: Vec<usize> },
    #[error("gradient requested for `{0}`, which is not a leaf of the graph")]
    WrtAbsent(String),
    #[error("ctc target of length {target_len} (needs {required} frames) cannot align to {frames} frames")]
    Unalignable {
        target_len: usize,
        required: usize,
        frames: usize,
    },
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
}

pub type Result<T> = std::result::Result<T, NumError>;
