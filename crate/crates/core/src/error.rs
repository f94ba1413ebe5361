use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KacError {
    #[error("unsupported dimension {0}; only d = 2 and d = 3 are supported")]
    UnsupportedDimension(usize),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite velocity component at particle {0}")]
    NonFinite(usize),

    #[error("particle index {index} out of range for N = {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("collision requires distinct particles, got i = j = {0}")]
    SameParticle(usize),

    #[error("scattering direction undefined for zero relative velocity")]
    UndefinedDirection,

    #[error("absorbing state: total collision rate is zero")]
    Absorbing,

    #[error("degenerate configuration: all velocities coincide after centering")]
    Degenerate,

    #[error("grid mismatch between measures")]
    GridMismatch,

    #[error("positivity violated: step {dt} exceeds the stable bound {bound}")]
    Positivity { dt: f64, bound: f64 },

    #[error("not enough samples: need more than k = {k}, got {n}")]
    TooFewSamples { k: usize, n: usize },

    #[error("calibration mismatch: {0}")]
    Calibration(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for KacError {
    fn from(e: std::io::Error) -> Self {
        KacError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for KacError {
    fn from(e: serde_json::Error) -> Self {
        KacError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KacError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> KacError {
    KacError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
