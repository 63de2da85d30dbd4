//! Error type shared by every module of the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent or unusable run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An iterative solver failed to reach its tolerance.
    #[error("convergence failure: {0}")]
    Convergence(String),

    /// A grid is too coarse to resolve the quantity requested.
    #[error("resolution error: {0}")]
    Resolution(String),

    /// Fewer usable data points than a fit requires.
    #[error("insufficient points: {0}")]
    InsufficientPoints(String),

    /// An orbit failed to return to the base within the safety cap.
    #[error("orbit trapped: no return after {steps} steps from x={start}")]
    OrbitTrapped { start: f64, steps: u64 },

    /// An orbit landed exactly on a fixed point of the map.
    #[error("degenerate orbit: hit {0} exactly")]
    OrbitDegenerate(f64),

    /// Violation of an internal invariant; indicates a bug.
    #[error("internal error: {0}")]
    Internal(String),
}
