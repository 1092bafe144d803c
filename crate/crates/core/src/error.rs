use std::path::PathBuf;

/// Errors raised anywhere in the selection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate example id {0:?}")]
    DuplicateId(String),

    #[error("invalid example at line {line}: {message}")]
    InvalidExample { line: usize, message: String },

    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape {
        what: String,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: String, row: usize },

    #[error("bank {0:?} is empty")]
    EmptyBank(String),

    #[error("bank {0:?} has no embeddings attached")]
    MissingEmbeddings(String),

    #[error("degenerate vector: norm is zero")]
    DegenerateVector,

    #[error("degenerate projection: projected norm {norm:e} is below 1e-12")]
    DegenerateProjection { norm: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("template error: missing value for slot {{{slot}}}")]
    Template { slot: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Wraps the error with a short description of where it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
