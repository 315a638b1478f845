use thiserror::Error;

pub type Result<T> = std::result::Result<T, FrzError>;

#[derive(Debug, Error)]
pub enum FrzError {
    /// Network description does not compose.
    #[error("invalid network: {0}")]
    Spec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric overflow at layer {layer}")]
    NumericOverflow { layer: usize },
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("run error at iteration {iteration}: {message}")]
    Run { iteration: u64, message: String },
    #[error("report error: {0}")]
    Report(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl FrzError {
    /// Process exit code for the CLI: 1 config, 2 run, 3 format.
    pub fn exit_code(&self) -> i32 {
        match self {
            FrzError::Spec(_) | FrzError::Config(_) | FrzError::Dataset(_) => 1,
            FrzError::Format(_) | FrzError::DimensionMismatch(_) => 3,
            FrzError::NumericOverflow { .. }
            | FrzError::Contract(_)
            | FrzError::Degenerate(_)
            | FrzError::Run { .. }
            | FrzError::Report(_)
            | FrzError::Io(_) => 2,
        }
    }
}

impl From<serde_json::Error> for FrzError {
    fn from(e: serde_json::Error) -> Self {
        FrzError::Config(e.to_string())
    }
}
