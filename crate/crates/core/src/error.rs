use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("model file schema violation at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("unstable eigenvalue λ = {0} where stability is required")]
    Unstable(num_complex::Complex64),

    #[error("near-singular cohomological system for non-resonant multi-index {0:?}; resonance tolerance may be too tight")]
    NearResonant(Vec<u8>),

    #[error("integrator step size collapsed at t = {0}")]
    StepSizeCollapse(f64),

    #[error("integrator exceeded max steps at t = {0}")]
    MaxStepsExceeded(f64),

    #[error("finite-escape blowup in Riccati sweep near t = {0}")]
    RiccatiEscape(f64),

    #[error("selection threshold {threshold} unreachable; cumulative metric saturates at {reached}")]
    ThresholdUnreachable { threshold: f64, reached: f64 },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
