use thiserror::Error;

/// Errors raised by generator backends, SUTs and the probing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("encode error: {0}")]
    Encode(String),

    #[error("decode error{}: {reason}", layer_suffix(.layer))]
    Decode { layer: Option<usize>, reason: String },

    #[error("topology mismatch at layer {layer}: {reason}")]
    Topology { layer: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The backend cannot provide gradients; callers fall back to finite differences.
    #[error("backend is not differentiable")]
    NotDifferentiable,

    #[error("operation not supported by this backend: {0}")]
    Unsupported(String),

    #[error("backend not initialized: {0}")]
    Uninitialized(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("http error: {0}")]
    Http(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

fn layer_suffix(layer: &Option<usize>) -> String {
    match layer {
        Some(l) => format!(" in layer {l}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
