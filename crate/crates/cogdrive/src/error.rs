use thiserror::Error;

#[derive(Debug, Error)]
pub enum CogError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}{}: {msg}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    Parse {
        path: String,
        context: Option<String>,
        msg: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("unknown template '{0}' (valid: straight_follow, unprotected_left, merge, crossing)")]
    UnknownTemplate(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("checkpoint/config mismatch on parameter '{name}': expected shape {expected:?}, found {found:?}")]
    CheckpointMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("infeasible corridor: {0}")]
    InfeasibleCorridor(String),

    #[error("training diverged (non-finite loss) at batch {batch}")]
    Diverged { batch: usize },

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, CogError>;

impl CogError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CogError::Io {
            path: path.into(),
            source,
        }
    }
}
