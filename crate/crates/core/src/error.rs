use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("kron result {rows}x{cols} exceeds the supported 4x4 size")]
    DimensionOverflow { rows: usize, cols: usize },

    #[error("matrix is not Hermitian: max |M - M^dagger| = {norm:e}")]
    NotHermitian { norm: f64 },

    #[error("matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:e}")]
    NotPsd { min_eigenvalue: f64 },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("trace {trace} outside (0, 1]")]
    InvalidTrace { trace: f64 },

    #[error("state has trace {trace}; renormalize before computing this quantity")]
    NotNormalized { trace: f64 },

    #[error("state fully post-selected away (trace {trace:e})")]
    PostSelectedAway { trace: f64 },

    #[error("parameter `{name}` = {value} outside [{min}, {max}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid state parameters: {0}")]
    InvalidState(String),

    #[error("composition would produce {count} operators (cap {cap}); apply the channels one after the other instead")]
    TooManyOperators { count: usize, cap: usize },

    #[error("channel is not trace-preserving (deficit {deficit:e})")]
    NotTracePreserving { deficit: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("physicality violation: {0}")]
    Unphysical(String),

    #[error("degenerate spectrum: {0}; use the Monte Carlo estimate instead")]
    Degenerate(String),

    #[error("optical train leaves path `{path}` unconnected")]
    UnconnectedPath { path: String },

    #[error("invalid optical train: {0}")]
    InvalidTrain(String),

    #[error("no optical realization: {0}")]
    NoOpticalRealization(String),

    #[error(
        "measurement settings are informationally incomplete (null space dimension {null_dim})"
    )]
    InformationallyIncomplete { null_dim: usize },

    #[error("unknown measurement setting label `{0}`")]
    UnknownSetting(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_range(name: &'static str, value: f64, min: f64, max: f64) -> Result<()> {
    if value.is_finite() && value >= min && value <= max {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value,
            min,
            max,
        })
    }
}
