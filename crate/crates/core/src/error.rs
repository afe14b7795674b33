use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("integration overflow in trajectory {trajectory} at step {step}")]
    IntegrationOverflow { trajectory: usize, step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("riccati solver failed: {reason} (residual {residual:.3e})")]
    Riccati { reason: String, residual: f64 },

    #[error("design error: {0}")]
    Design(String),

    #[error("allocation error: {0}")]
    Allocation(String),

    #[error("simulation aborted at t = {time:.3}: {reason}")]
    Simulation { time: f64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
