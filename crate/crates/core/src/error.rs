use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        /// Flattened last iterate, kept so callers can inspect or restart from it.
        last: Vec<f64>,
    },

    #[error("landmark table: {0}")]
    Table(String),

    #[error("topology: {0}")]
    Topology(String),

    #[error("hierarchy: {0}")]
    Hierarchy(String),

    #[error("autodiff: {0}")]
    Graph(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{path}: line {line}, byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        offset: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by malformed files or inconsistent input data,
    /// as opposed to numerical failures.
    pub fn is_input_format(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Checkpoint(_)
                | Error::Json(_)
                | Error::Io { .. }
                | Error::Table(_)
                | Error::Topology(_)
                | Error::Shape(_)
                | Error::InvalidInput(_)
                | Error::Config(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Shape(_) => "shape",
            Error::DegenerateMotion(_) => "degenerate_motion",
            Error::Singularity(_) => "singularity",
            Error::Convergence { .. } => "convergence",
            Error::Table(_) => "table",
            Error::Topology(_) => "topology",
            Error::Hierarchy(_) => "hierarchy",
            Error::Graph(_) => "graph",
            Error::Diverged(_) => "diverged",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
