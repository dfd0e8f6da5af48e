use thiserror::Error;

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("loss node {node} is not a scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("graph has pending nodes; call evaluate() first")]
    Unevaluated,

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("graph has no input named `{0}`")]
    UnknownInput(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("loss function is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("loss function failed: {0}")]
    LossFn(String),
}
