use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: expected {expected:?}, got {got:?}")]
    Dimension {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("node {index} belongs to tape {node_tape}, not tape {tape}")]
    ForeignTape {
        index: usize,
        node_tape: u64,
        tape: u64,
    },
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        TensorError::Dimension {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Domain {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
