use thiserror::Error;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("perturbation is not admissible: {0}")]
    NotAdmissible(String),
    #[error("bound violated: {0}")]
    BoundViolation(String),
    #[error("sampler exhausted after {attempts} attempts: {reason}")]
    SamplerExhausted { attempts: usize, reason: String },
}

pub type Result<T, E = TheoryError> = std::result::Result<T, E>;
