use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants split into two families: input validation (bad files, bad
/// arguments, contract violations) and numerical/stage failures. The CLI
/// maps the first family to exit code 2 and the second to exit code 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got}{}", context_suffix(.context))]
    Dimension {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("non-finite value in record `{0}`")]
    NonFinite(String),

    #[error("label {label} of record `{id}` is out of range for {classes} classes")]
    LabelOutOfRange { id: String, label: i64, classes: usize },

    #[error("record `{0}` has no label")]
    MissingLabel(String),

    #[error("zero-norm vector for `{0}`")]
    ZeroVector(String),

    #[error("invalid store file: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unresolvable ids: {}", .0.join(", "))]
    UnresolvedIds(Vec<String>),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("checkpoint provenance `{0}` is not target-dev selection")]
    Provenance(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl Error {
    pub fn dim(expected: usize, got: usize, context: impl Into<String>) -> Self {
        Error::Dimension {
            expected,
            got,
            context: context.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad inputs rather than failed computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            // A missing input file is a bad argument; other I/O failures are not.
            Error::Io(e) => e.kind() == std::io::ErrorKind::NotFound,
            Error::Numerical(_) | Error::Diverged { .. } => false,
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
