use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid preference vector: {0}")]
    InvalidPreference(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Every task gradient vanishes, so the current point is already Pareto
    /// stationary and no bargaining weights exist.
    #[error("all task gradients vanish (Pareto stationary input)")]
    ParetoStationary,

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error("bargaining weights not converged (residual {residual:.3e})")]
    NotConverged { residual: f64 },

    #[error("weight {index} is not strictly positive ({value})")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::ParetoStationary
                | Error::Diverged(_)
                | Error::NotConverged { .. }
                | Error::NonPositiveWeight { .. }
                | Error::Singular(_)
        )
    }

    /// Short machine-friendly tag for single-line error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Empty(_) => "empty_input",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidPreference(_) => "invalid_preference",
            Error::InvalidConfig(_) => "invalid_config",
            Error::ParetoStationary => "pareto_stationary",
            Error::Diverged(_) => "diverged",
            Error::NotConverged { .. } => "not_converged",
            Error::NonPositiveWeight { .. } => "non_positive_weight",
            Error::Singular(_) => "singular",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
