use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("capacity error: {objects} objects exceed {slots} slots")]
    Capacity { objects: usize, slots: usize },
    #[error("invalid program: {0}")]
    Program(String),
    #[error("data error: missing or invalid field {0}")]
    Data(String),
    #[error("unmatched ids: {0:?}")]
    UnmatchedIds(Vec<String>),
    #[error("unknown question id {0}")]
    UnknownQuestion(String),
    #[error("version mismatch: {0}")]
    Version(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
