use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or index sets that do not agree with the action layout.
    #[error("layout error: {0}")]
    Layout(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    /// Cholesky breakdown; `pivot` is the zero-based failing diagonal index.
    #[error("factorization error: non-positive pivot {value:e} at index {pivot}")]
    Factorization { pivot: usize, value: f64 },

    #[error("numerical error at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("labeling error: {0}")]
    Labeling(String),

    #[error("interpolation error: {0}")]
    Interpolation(String),

    #[error("training diverged at step {step}: loss {loss:e}")]
    Divergence { step: usize, loss: f64 },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Layout(_) => "layout",
            Error::Estimation(_) => "estimation",
            Error::Parameter(_) => "parameter",
            Error::Factorization { .. } => "factorization",
            Error::Numerical { .. } => "numerical",
            Error::Config(_) => "config",
            Error::Labeling(_) => "labeling",
            Error::Interpolation(_) => "interpolation",
            Error::Divergence { .. } => "divergence",
            Error::Generation(_) => "generation",
            Error::Format(_) | Error::Json(_) => "format",
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "missing-file",
            Error::Io(_) => "io",
        }
    }
}
