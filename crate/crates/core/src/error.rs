use thiserror::Error;

pub type Result<T, E = FbError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FbError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric error at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("training diverged at step {step}: fb loss {loss:.3e} exceeds {threshold:.1e}")]
    Divergence { step: usize, loss: f64, threshold: f64 },

    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("parse error in {source_name} line {line}: {msg}")]
    Parse { source_name: String, line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FbError {
    pub fn contract(msg: impl Into<String>) -> Self {
        FbError::Contract(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FbError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code: 2 contract/config, 3 numeric divergence, 4 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            FbError::Numeric { .. } | FbError::Divergence { .. } => 3,
            FbError::Io { .. } => 4,
            _ => 2,
        }
    }
}
