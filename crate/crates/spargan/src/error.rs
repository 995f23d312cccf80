use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Every failure carries enough structure for the CLI
/// to print a single `error: <stage>: <detail>` line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("node {node} ({op}): shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    BadTensorLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("node {node} is not a scalar loss (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("replay is missing a value for input `{name}`")]
    MissingInput { name: String },

    #[error("no node named `{name}` in the record")]
    UnknownNode { name: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("binary target {value} is not 0 or 1")]
    InvalidBinaryTarget { value: f64 },

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    GradShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },

    #[error("no gradient supplied for parameter `{name}`")]
    MissingGradient { name: String },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("n-shot request {n} exceeds the {available} train samples per novel class")]
    NShotTooLarge { n: usize, available: usize },

    #[error("class {class} has no samples in the pool")]
    EmptyClass { class: usize },

    #[error("batch pool contains a single class; cannot draw mismatched captions")]
    SingleClassPool,

    #[error("adapted discriminator needs at least 2 novel classes, got {0}")]
    TooFewClasses(usize),

    #[error("candidates in one ranking call span classes {first} and {second}")]
    MixedClasses { first: usize, second: usize },

    #[error("top-{k} requested from {available} ranked candidates")]
    SelectionTooLarge { k: usize, available: usize },

    #[error("class {class} has {actual} ranked candidates, chunk analysis needs {expected}")]
    WrongCandidateCount {
        class: usize,
        expected: usize,
        actual: usize,
    },

    #[error("quality oracle reached {achieved:.4} held-out top-1, below the {floor:.2} floor; review world noise or sample counts")]
    OracleBelowFloor { achieved: f64, floor: f64 },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    BadCheckpointVersion { found: u32, expected: u32 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn stage(stage: &'static str) -> impl Fn(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Exit code for the CLI: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig { .. } | Error::Json { .. } => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
