use thiserror::Error;

/// Coarse error classes, used for CLI exit codes and machine-readable reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported distribution: {0}")]
    UnsupportedDistribution(String),

    #[error("input covariance is singular (sigma_min {sigma_min:e}, sigma_max {sigma_max:e})")]
    SingularCovariance { sigma_min: f64, sigma_max: f64 },

    #[error("probe matrices stayed degenerate after {attempts} attempts: {reason}")]
    DegenerateSpan { attempts: usize, reason: String },

    #[error("eigenpairs stayed complex after {attempts} attempts (|imag|/|real| up to {ratio:e})")]
    ComplexEigenpairs { attempts: usize, ratio: f64 },

    #[error("alternating least squares failed in every restart (best residual {best_residual:e})")]
    ConvergenceFailure { best_residual: f64 },

    #[error("rank deficiency: sigma_{rank} = {sigma:e} relative to sigma_1 = {sigma_max:e}")]
    RankDeficiency {
        rank: usize,
        sigma: f64,
        sigma_max: f64,
    },

    #[error("gradient descent diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("weight row {0} is zero; pair angle undefined")]
    ZeroRow(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::UnsupportedDistribution(_) => {
                ErrorClass::Config
            }
            Error::EmptyInput(_) | Error::Data(_) | Error::Io(_) | Error::Json(_) => {
                ErrorClass::Data
            }
            Error::SingularCovariance { .. }
            | Error::DegenerateSpan { .. }
            | Error::ComplexEigenpairs { .. }
            | Error::ConvergenceFailure { .. }
            | Error::RankDeficiency { .. }
            | Error::Divergence { .. }
            | Error::ZeroRow(_)
            | Error::Numerical(_) => ErrorClass::Numerical,
        }
    }

    /// Short stable identifier of the variant, e.g. `"singular_covariance"`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::EmptyInput(_) => "empty_input",
            Error::Data(_) => "data",
            Error::UnsupportedDistribution(_) => "unsupported_distribution",
            Error::SingularCovariance { .. } => "singular_covariance",
            Error::DegenerateSpan { .. } => "degenerate_span",
            Error::ComplexEigenpairs { .. } => "complex_eigenpairs",
            Error::ConvergenceFailure { .. } => "convergence_failure",
            Error::RankDeficiency { .. } => "rank_deficiency",
            Error::Divergence { .. } => "divergence",
            Error::ZeroRow(_) => "zero_row",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
