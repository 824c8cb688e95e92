use thiserror::Error;

/// Crate-wide error type. Variants map to CLI exit codes: config problems,
/// missing inputs, and runtime failures are distinguished by the binary.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("encoding: {0}")]
    Encoding(String),

    #[error("model: {0}")]
    Model(String),

    #[error("training: {0}")]
    Training(String),

    #[error("generation: {0}")]
    Generation(String),

    #[error("estimation: {0}")]
    Estimation(String),

    #[error(transparent)]
    Tensor(#[from] lifeseq_tensor::TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
