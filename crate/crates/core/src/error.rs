use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model construction failed after {attempts} attempts: {reason}")]
    ConstructionFailed { attempts: usize, reason: String },

    #[error("Stokes part is singular: mu[{index}] = {value}")]
    SingularA0 { index: usize, value: f64 },

    #[error("eigenvalue {re}{im:+}i lies within {tol:e} of Re = {sigma}")]
    GapViolation { sigma: f64, re: f64, im: f64, tol: f64 },

    #[error("contour passes within {distance:e} of the spectrum")]
    ContourTouchesSpectrum { distance: f64 },

    #[error("invalid contour: {0}")]
    InvalidContour(String),

    #[error("no admissible level in [{lo}, {hi}]: every grid point is within the gap tolerance")]
    EmptyGap { lo: f64, hi: f64 },

    #[error("Gram system is singular (condition number {cond:e})")]
    SingularGram { cond: f64 },

    #[error("rejection sampler acceptance rate {rate:e} over {window} draws is below the cap")]
    RejectionCap { rate: f64, window: u64 },

    #[error("projected covariance is degenerate (smallest eigenvalue {min_eig:e})")]
    DegenerateCovariance { min_eig: f64 },

    #[error("model has no eigenvalue with negative real part")]
    NotUnstable,

    #[error("quadrature unsupported for slice dimension {m}")]
    QuadratureUnsupported { m: usize },

    #[error("bisection bracket not found after {doublings} doublings")]
    BracketFailure { doublings: usize },

    #[error("point is not on the support boundary (radicand {radicand:e})")]
    ProbeOffBoundary { radicand: f64 },

    #[error("point is not in the interior of the support")]
    NotInterior,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
