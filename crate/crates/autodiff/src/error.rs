use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("gradient output must be scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("finite-difference check requires 64-bit precision")]
    PrecisionTooLow,
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("non-finite function value {value} when perturbing element {index} ({direction})")]
    NonFinite {
        index: usize,
        direction: &'static str,
        value: f64,
    },
}
