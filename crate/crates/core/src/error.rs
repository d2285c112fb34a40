use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("undefined sub-circuit `{name}` referenced by `{instance}` in `{parent}`")]
    UndefinedSubckt {
        name: String,
        instance: String,
        parent: String,
    },
    #[error("duplicate instance `{instance}` in sub-circuit `{subckt}`")]
    DuplicateInstance { subckt: String, instance: String },
    #[error("instance `{instance}` of `{subckt}` connects {got} nets, definition has {expected} ports")]
    PortArity {
        instance: String,
        subckt: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid design: {0}")]
    Design(String),
    #[error("placement: {0}")]
    Placement(String),
    #[error("labels: {0}")]
    Labels(String),
    #[error("missing placement for `{instance}` in `{subckt}`")]
    MissingPlacement { subckt: String, instance: String },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("autodiff: {0}")]
    Autodiff(String),
    #[error("features: {0}")]
    Features(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss in sub-circuit `{subckt}` at epoch {epoch}")]
    NonFinite { subckt: String, epoch: usize },
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("generator: {0}")]
    Generator(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code, used by the CLI for machine-parsable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Syntax { .. } => "syntax",
            Error::UndefinedSubckt { .. } => "undefined-subckt",
            Error::DuplicateInstance { .. } => "duplicate-instance",
            Error::PortArity { .. } => "port-arity",
            Error::Design(_) => "design",
            Error::Placement(_) => "placement",
            Error::Labels(_) => "labels",
            Error::MissingPlacement { .. } => "missing-placement",
            Error::Shape { .. } => "shape",
            Error::Autodiff(_) => "autodiff",
            Error::Features(_) => "features",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::NonFinite { .. } => "non-finite",
            Error::Metrics(_) => "metrics",
            Error::Checkpoint(_) => "checkpoint",
            Error::Generator(_) => "generator",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
