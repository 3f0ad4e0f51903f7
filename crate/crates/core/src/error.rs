use thiserror::Error;

/// Errors surfaced by the solver library.
#[derive(Debug, Error)]
pub enum EndowError {
    /// Market parameters violate a basic domain constraint.
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// The frictionless problem itself is degenerate (b1 <= 0): no finite
    /// value function and no certainty-equivalent price exist.
    #[error("degenerate problem: b1 = {b1} <= 0, value function is not finite")]
    DegenerateMerton { b1: f64 },

    /// Value requested for a parameter set where the value function is
    /// infinite.
    #[error("value function is infinite for this parameter set")]
    IllPosedValue,

    /// A derivative evaluation was requested outside the admissible band.
    #[error("state ({q}, {n}) lies outside the admissible band")]
    DomainViolation { q: f64, n: f64 },

    /// Adaptive step size underflowed before any termination event.
    #[error("step size underflow at q = {q}")]
    StiffnessFailure { q: f64 },

    /// The bisection bracket for the critical threshold did not straddle it.
    #[error("bisection bracket failure: {0}")]
    BracketFailure(String),

    /// The free-boundary transform N lost strict monotonicity on the grid.
    #[error("monotonicity violation: {0}")]
    MonotonicityViolation(String),

    /// The value-shape reconstruction failed to integrate.
    #[error("integration failure: {0}")]
    IntegrationFailure(String),

    /// The improper-integral tail could not be truncated at the requested
    /// accuracy.
    #[error("tail estimate failure: {0}")]
    TailEstimateFailure(String),

    /// The consumption base g - z g'/(1-R) was non-positive.
    #[error("non-positive consumption base at z = {z}")]
    NonpositiveBase { z: f64 },

    /// A simulation routine was called for the wrong regime.
    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),

    /// A simulated wealth path left the admissible set.
    #[error("step rejection: {0}")]
    StepRejection(String),
}

pub type Result<T> = std::result::Result<T, EndowError>;
