use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("tensor construction: shape {shape} needs {expected} values, got {actual}")]
    ValueCount {
        shape: String,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: dtype error: {detail}")]
    DType { op: &'static str, detail: String },

    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unflatten: structure expects {expected} leaves, got {actual}")]
    LeafCount { expected: usize, actual: usize },

    #[error("structure mismatch: {left} vs {right}")]
    Structure { left: String, right: String },

    #[error("node kind `{0}` is already registered")]
    DuplicateTag(String),

    #[error("node kind `{0}` is not registered")]
    UnknownTag(String),

    #[error("schema `{tag}`: {detail}")]
    Schema { tag: String, detail: String },

    #[error("`{tag}` has no field `{field}`")]
    UnknownField { tag: String, field: String },

    #[error("`{tag}` has no method `{method}`")]
    UnknownMethod { tag: String, method: String },

    #[error("function `{0}` is not registered")]
    UnknownFunction(String),

    #[error("combine: both trees hold a value at {path}")]
    CombineConflict { path: String },

    #[error("{op}: tracer from a finished trace leaked into this computation")]
    TracerLeak { op: &'static str },

    #[error("cannot read the concrete value of a traced array ({0}); value-dependent control flow is not traceable")]
    Concretization(String),

    #[error("transformation nesting depth {depth} exceeds the supported maximum of {max}")]
    NestingTooDeep { depth: usize, max: usize },

    #[error("trace: {0}")]
    Trace(String),

    #[error("eval_graph: input {index} declared {declared}, got {actual}")]
    GraphInput {
        index: usize,
        declared: String,
        actual: String,
    },

    #[error("grad: {0}")]
    Grad(String),

    #[error("vmap: inconsistent batch sizes {first} and {second}")]
    BatchMismatch { first: usize, second: usize },

    #[error("vmap: {0}")]
    Vmap(String),

    #[error("jit: {0}")]
    Jit(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint version mismatch: expected `{expected}`, found `{found}`")]
    CheckpointVersion { expected: String, found: String },

    #[error("checkpoint checksum mismatch: file is corrupted")]
    CheckpointChecksum,

    #[error(
        "checkpoint leaf count mismatch: structure has {expected} leaves, file records {actual}"
    )]
    CheckpointLeafCount { expected: usize, actual: usize },

    #[error("checkpoint decode error on line {line}: {detail}")]
    CheckpointDecode { line: usize, detail: String },

    #[error("fingerprint parse error at byte {pos}: {detail}")]
    FingerprintParse { pos: usize, detail: String },

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
