use pdpha_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdpError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("node index {index} out of range for {nodes} nodes")]
    IndexOutOfRange { index: usize, nodes: usize },
    #[error("route is complete; no action is available")]
    RouteComplete,
    #[error("action {action} is masked: {reason}")]
    InfeasibleAction { action: usize, reason: String },
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("{what} supports n <= {max}, got n = {n}")]
    TooLarge { what: &'static str, n: usize, max: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PdpError>;
