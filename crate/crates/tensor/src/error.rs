use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape {shape:?} holds {expected} elements but data has {actual}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: expected a {expected}-d tensor, got shape {actual:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },

    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    Dim {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: shapes {lhs:?} and {rhs:?} are incompatible")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },

    #[error("backward: loss must hold exactly one element, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Self::Invalid {
            op,
            reason: reason.into(),
        }
    }
}
