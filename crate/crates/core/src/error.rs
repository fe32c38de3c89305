use thiserror::Error;

/// Errors raised by the solver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empirical measure needs at least one sample")]
    EmptySamples,
    #[error("negative or non-finite weight {weight} at index {index}")]
    NegativeWeight { index: usize, weight: f64 },
    #[error("all weights are zero")]
    ZeroMass,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite sample coordinate at index {index}")]
    NonFiniteSample { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("population count mismatch: {left} vs {right}")]
    PopulationCountMismatch { left: usize, right: usize },
    #[error("time grids do not match")]
    GridMismatch,
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("diffusion matrix is singular at t={t}")]
    SingularDiffusion { t: f64 },
    #[error("non-finite state for particle {particle} at step {step}")]
    NonFiniteState { particle: usize, step: usize },
    #[error("non-finite Doleans-Dade weight for particle {particle} at step {step}")]
    NonFiniteWeight { particle: usize, step: usize },
    #[error("regression is rank deficient at step {step}: {reason}")]
    RankDeficientRegression { step: usize, reason: String },
    #[error("grid index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("control {0:?} lies outside the control set")]
    ControlOutOfSet(Vec<f64>),
    #[error("Hamiltonian minimization did not converge: projected gradient norm {residual:e}")]
    NonConvergence { residual: f64 },
    #[error("population {population} has no {which} gradient and finite differencing is disabled")]
    MissingGradient { population: usize, which: &'static str },
    #[error("|C'| = {c_prime} exceeds the clip constant {clip}")]
    ClipViolation { c_prime: f64, clip: f64 },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("unknown bundle `{0}`")]
    UnknownBundle(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

pub type Result<T> = std::result::Result<T, Error>;
