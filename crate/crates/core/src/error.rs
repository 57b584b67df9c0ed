use alloc::string::String;
use alloc::vec::Vec;

use crate::algebra::GeneratorViolation;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid generator: {0:?}")]
    InvalidGenerator(Vec<GeneratorViolation>),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix {0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("matrix {0} is not symmetric positive semidefinite")]
    NotPositiveSemidefinite(&'static str),
    #[error("vector is not a probability vector (sum {sum}, min {min})")]
    NotOnSimplex { sum: f64, min: f64 },
    #[error("state index {index} out of range for {d} states")]
    IndexOutOfRange { index: usize, d: usize },
    #[error("argument is not a basis vector")]
    NotBasisVector,
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("time grids do not match")]
    GridMismatch,
    #[error("filter renormalization failed at step {step}: all mass clipped (dt too large for the noise scale)")]
    Renormalization { step: usize },
    #[error("Riccati iterate lost positive semidefiniteness at step {step} (min eigenvalue {min_eig})")]
    RiccatiBlowUp { step: usize, min_eig: f64 },
    #[error("rank-deficient regression at time index {step}")]
    RankDeficient { step: usize },
    #[error("empty bundle")]
    EmptyBundle,
    #[error("missing BSDE solution for the policy")]
    MissingBsdeSolution,
    #[error("policy kind mismatch: {0}")]
    PolicyMismatch(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn dim(msg: &str) -> Self {
        Error::Dimension(String::from(msg))
    }

    pub(crate) fn param(name: &'static str, reason: &str) -> Self {
        Error::InvalidParameter {
            name,
            reason: String::from(reason),
        }
    }

    /// True for errors that signal a numeric failure (blow-up, clipping)
    /// rather than a bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Renormalization { .. } | Error::RiccatiBlowUp { .. } | Error::RankDeficient { .. }
        )
    }
}
