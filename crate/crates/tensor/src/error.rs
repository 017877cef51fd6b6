use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid tensor: {0}")]
    InvalidShape(String),

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },

    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },

    #[error("node {node} ({op}): {detail}")]
    Domain { node: usize, op: &'static str, detail: String },

    #[error("tape values are stale; call eval() before backward()")]
    NotEvaluated,

    #[error("node {0} is not a leaf")]
    NotLeaf(usize),

    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },

    #[error("{0}")]
    Invalid(String),
}

/// Failure reported by an [`crate::Op`] before the tape knows the node id.
#[derive(Debug, Clone, PartialEq)]
pub enum OpError {
    Shape(String),
    Domain(String),
}

impl OpError {
    pub(crate) fn at(self, node: usize, op: &'static str) -> TensorError {
        match self {
            OpError::Shape(detail) => TensorError::ShapeMismatch { node, op, detail },
            OpError::Domain(detail) => TensorError::Domain { node, op, detail },
        }
    }
}

/// Shape guard used by op implementations.
pub fn expect_shape(what: &str, got: &[usize], want: &[usize]) -> Result<(), OpError> {
    if got == want {
        Ok(())
    } else {
        Err(OpError::Shape(format!("{what}: expected {want:?}, got {got:?}")))
    }
}
