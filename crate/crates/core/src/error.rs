//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WillmoreError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter out of range: {0}")]
    Range(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("immersion failure at theta={theta:.6}, phi={phi:.6}: {reason}")]
    Immersion { theta: f64, phi: f64, reason: String },

    #[error("geodesic left the coordinate box after {step} steps")]
    GeodesicEscape { step: usize },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("at a = ({:.6}, {:.6}, {:.6}), lambda = {lambda}: {source}", a[0], a[1], a[2])]
    AtPoint { a: [f64; 3], lambda: f64, source: Box<WillmoreError> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl WillmoreError {
    /// True for errors caused by bad user input rather than numerics.
    pub fn is_usage(&self) -> bool {
        match self {
            WillmoreError::AtPoint { source, .. } => source.is_usage(),
            e => matches!(e, WillmoreError::Config(_) | WillmoreError::Json(_) | WillmoreError::Io(_)),
        }
    }
}

pub type Result<T> = std::result::Result<T, WillmoreError>;
