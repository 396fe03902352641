use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum NemfError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("descriptor channel mismatch: source has {src}, target has {tgt}")]
    ChannelMismatch { src: usize, tgt: usize },

    #[error("{path}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {found}")]
    BadVersion { path: String, found: u16 },

    #[error("{path}: truncated file while reading {context}")]
    Truncated { path: String, context: String },

    #[error("{context}: non-finite value at index {index}")]
    NonFinite { context: String, index: usize },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{path}: missing tensor {name}")]
    MissingTensor { path: String, name: String },

    #[error("exhaustive evaluation refused: {evaluations} evaluations exceed the guard of {limit}")]
    EvaluationGuard { evaluations: u64, limit: u64 },

    #[error("annotation provides no keypoint pairs")]
    EmptyAnnotation,

    #[error("prediction/ground-truth count mismatch: {predictions} vs {ground_truth}")]
    CountMismatch {
        predictions: usize,
        ground_truth: usize,
    },

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Record {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("image error: {0}")]
    Image(String),
}

pub type NemfResult<T> = std::result::Result<T, NemfError>;

impl NemfError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        NemfError::Io {
            path: path.into(),
            source,
        }
    }
}
