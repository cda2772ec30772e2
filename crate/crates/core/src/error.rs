use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum IgmError {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),

    #[error("self-loop on node {0}")]
    SelfLoop(usize),

    #[error("edge endpoint {endpoint} out of range for graph with {num_nodes} nodes")]
    EndpointOutOfRange { endpoint: usize, num_nodes: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("mask length {actual} does not match edge count {expected}")]
    MaskLength { expected: usize, actual: usize },

    #[error("unsupported schema version {actual} (expected {expected})")]
    VersionMismatch { expected: u32, actual: u32 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("ratio cap violated: {nodes} invariant nodes exceed budget {budget}")]
    RatioCap { nodes: usize, budget: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IgmError>;

impl From<serde_json::Error> for IgmError {
    fn from(e: serde_json::Error) -> Self {
        IgmError::Parse(e.to_string())
    }
}
