use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: input too short: need at least {needed} time steps, got {got}")]
    InputTooShort {
        op: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("{op}: index {index} out of range for {len} entries")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
}
