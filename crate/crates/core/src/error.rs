use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImportanceError {
    #[error("base probability {name}={value} must lie strictly inside (0, 1)")]
    BaseProbability { name: &'static str, value: f64 },
    #[error("alpha must be positive, got {0}")]
    Alpha(f64),
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("replacement needs at least two content ids, vocabulary has {0}")]
    Vocabulary(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("infeasible generator config: {0}")]
    Config(String),
    #[error("line {line}: bad field `{field}`: {reason}")]
    Parse {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("missing or unsupported header (expected `{expected}`)")]
    Header { expected: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("missing or unsupported header (expected `{expected}`)")]
    Header { expected: &'static str },
    #[error("checkpoint is missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("config line {line}: {reason}")]
    ConfigParse { line: usize, reason: String },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("loss diverged at step {step} (value {value})")]
    Diverged { step: u64, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("reference {0} is empty")]
    EmptyReference(usize),
    #[error("noisy-context protocol needs at least 2 documents, found {0}")]
    TooFewDocuments(usize),
    #[error("noisy-context protocol needs {needed} context sentences, record {doc_id}/{sent_id} has {found}")]
    ContextWindow {
        doc_id: u32,
        sent_id: u32,
        needed: usize,
        found: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}
