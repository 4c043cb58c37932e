use thiserror::Error;

/// Errors produced anywhere in the fusion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate softmax row {row}: every position is masked")]
    DegenerateRow { row: usize },

    #[error("sequence length {len} exceeds relative-position capacity {capacity}")]
    Capacity { len: usize, capacity: usize },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("variable does not belong to this computation record")]
    ForeignVar,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parameter {0} has no gradient")]
    MissingGradient(usize),

    #[error("covariance not positive definite for {0}; increase regularisation")]
    NotPositiveDefinite(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid record{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged in {stage}: {detail}")]
    Diverged { stage: String, detail: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Attaches a stage tag unless the error already names one.
    pub(crate) fn in_stage(self, stage: impl std::fmt::Display) -> Self {
        match self {
            e @ (Error::Stage { .. } | Error::Diverged { .. }) => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
