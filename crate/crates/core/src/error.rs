use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("transition error: event `{event}` is not applicable in stage {stage}")]
    Transition { stage: String, event: String },

    #[error("ordering error: timestamp {ts} precedes last recorded {last}")]
    Ordering { ts: i64, last: i64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid prescription: {}", list(.0))]
    Prescription(Vec<crate::dosing::Violation>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn list(v: &[crate::dosing::Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
