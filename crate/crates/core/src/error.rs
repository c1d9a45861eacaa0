//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument failed basic validation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A documented precondition of an operation was not met.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A numeric evaluation left the representable/finite domain.
    #[error("numeric domain error in {context}: {detail}")]
    NumericDomain { context: String, detail: String },

    /// An assumption required for the computed quantity to be meaningful
    /// does not hold for the supplied inputs.
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    /// The state left the guard band during path simulation.
    #[error("simulation blow-up at step {step}: |state| = {value:e}")]
    SimulationBlowup { step: usize, value: f64 },

    /// A diffusion coefficient evaluated to zero where it is divided by.
    #[error("division guard: {quantity} is zero at node {index}")]
    DivisionGuard { quantity: String, index: usize },

    /// Every importance weight underflowed to -inf.
    #[error("degenerate weights: all latent importance weights are -inf")]
    DegenerateWeights,

    /// Too few samples/draws to run the requested diagnostic.
    #[error("insufficient sample: {0}")]
    InsufficientSample(String),

    /// A sampler was started from a point of zero posterior mass.
    #[error("invalid start: {0}")]
    InvalidStart(String),

    /// Filesystem or serialization failure while emitting artifacts.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
