use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {message}")]
    Config { message: String, keys: Vec<String> },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Core(#[from] d3t_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(message: impl Into<String>, keys: Vec<String>) -> Self {
        CliError::Config {
            message: message.into(),
            keys,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Dataset(_) => "dataset",
            CliError::Core(d3t_core::Error::NonFinite { .. }) => "non_finite",
            CliError::Core(_) => "invalid_input",
            CliError::Io(_) => "io",
            CliError::Image(_) => "image",
            CliError::Json(_) => "json",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }

    /// One-line JSON error record.
    pub fn record(&self) -> serde_json::Value {
        let mut v = json!({
            "status": "error",
            "kind": self.kind(),
            "message": self.to_string(),
        });
        match self {
            CliError::Config { keys, .. } => v["keys"] = json!(keys),
            CliError::Core(d3t_core::Error::NonFinite { trace, .. }) => v["trace"] = json!(trace),
            _ => {}
        }
        v
    }
}
