//! Crate-wide error type.

use std::fmt;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Matrix/vector dimensions do not match an operation's contract.
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },
    /// A matrix expected to be Schur-stable has spectral radius >= 1.
    NotContractive { spectral_radius: f64 },
    /// No stabilizing feedback gain could be found.
    NotStabilizable,
    /// An iterative solver did not reach its tolerance within the cap.
    NoConvergence { iterations: usize },
    /// An input sequence is shorter than the requested block order needs.
    SequenceTooShort { needed: usize, got: usize },
    /// A network description violates a structural invariant.
    InvalidTopology(String),
    /// The sampling period makes the Euler discretization singular.
    SingularDiscretization,
    /// The dispatch problem has no feasible solution.
    Infeasible(String),
    /// The full-row-rank condition of the augmented model fails.
    AssumptionViolated { rank: usize, required: usize },
    /// A trajectory is too short to lift into increment form.
    HistoryTooShort { needed: usize, got: usize },
    /// Collected data does not span the required subspace.
    RankDeficient { rank: usize, required: usize },
    /// A regression system is too ill-conditioned to trust.
    IllConditioned { condition: f64 },
    /// A matrix block that must be inverted is singular.
    SingularBlock,
    /// A policy update produced a gain that does not stabilize the plant.
    DestabilizingUpdate { spectral_radius: f64 },
    /// Policy iteration hit its iteration cap before the stop tolerance.
    IterationCapExceeded { cap: usize },
    /// The reference gain of a normalized distance is zero.
    ZeroReference,
    /// A simulated trajectory exceeded the divergence bound.
    Diverged { step: usize, norm: f64 },
    /// A configuration document could not be parsed.
    Parse(String),
    /// One or more validation checks failed.
    ValidationFailed(Vec<String>),
    /// Filesystem error while writing run artifacts.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                context,
                expected,
                found,
            } => write!(f, "{context}: expected {expected}, found {found}"),
            Error::NotContractive { spectral_radius } => {
                write!(f, "matrix is not contractive (spectral radius {spectral_radius})")
            }
            Error::NotStabilizable => write!(f, "no stabilizing gain found"),
            Error::NoConvergence { iterations } => {
                write!(f, "solver did not converge within {iterations} iterations")
            }
            Error::SequenceTooShort { needed, got } => {
                write!(f, "sequence too short: need {needed} samples, got {got}")
            }
            Error::InvalidTopology(msg) => write!(f, "invalid topology: {msg}"),
            Error::SingularDiscretization => {
                write!(f, "-1 is an eigenvalue of tau*E*Lq; discretization is singular")
            }
            Error::Infeasible(msg) => write!(f, "dispatch infeasible: {msg}"),
            Error::AssumptionViolated { rank, required } => {
                write!(f, "augmented rank condition violated: rank {rank}, required {required}")
            }
            Error::HistoryTooShort { needed, got } => {
                write!(f, "history too short: need {needed} entries, got {got}")
            }
            Error::RankDeficient { rank, required } => {
                write!(f, "data rank deficient: rank {rank}, required {required}")
            }
            Error::IllConditioned { condition } => {
                write!(f, "regression ill-conditioned (condition number {condition:.3e})")
            }
            Error::SingularBlock => write!(f, "input-input block of the Q matrix is singular"),
            Error::DestabilizingUpdate { spectral_radius } => {
                write!(f, "policy update destabilizes the plant (spectral radius {spectral_radius})")
            }
            Error::IterationCapExceeded { cap } => {
                write!(f, "policy iteration cap of {cap} exceeded")
            }
            Error::ZeroReference => write!(f, "reference gain has zero norm"),
            Error::Diverged { step, norm } => {
                write!(f, "trajectory diverged at step {step} (|T|_inf = {norm:.3e})")
            }
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::ValidationFailed(items) => {
                write!(f, "validation failed: {}", items.join("; "))
            }
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
