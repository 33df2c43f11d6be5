use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context} (lhs {lhs:?}, rhs {rhs:?})")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("element at index {index} is {value}, expected exactly +1 or -1")]
    NonBinaryElement { index: usize, value: f32 },

    #[error("normal-equations system is numerically singular (condition estimate {cond:.3e}); supply a nonzero ridge lambda")]
    SingularSystem { cond: f64 },

    #[error("batch-norm scale is zero on channel {channel}; cannot fold threshold")]
    ZeroScale { channel: usize },

    #[error("non-finite value detected in layer {layer}: {context}")]
    NonFinite { layer: usize, context: String },

    #[error("layer {layer}: missing cached forward activations for backward pass")]
    MissingCache { layer: usize },

    #[error("model topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("layer index {index} out of range (model has {count} layers)")]
    LayerIndexOutOfRange { index: usize, count: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
