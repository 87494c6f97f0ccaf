use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate scale: column `{0}` has zero standard deviation")]
    DegenerateScale(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("time index {t} outside 1..={max}")]
    TimeOutOfRange { t: usize, max: usize },

    #[error("window too small at t={t}, h={h}: {points} effective points, {needed} required")]
    WindowTooSmall {
        t: usize,
        h: f64,
        points: usize,
        needed: usize,
    },

    #[error("singular design at t={t}, h={h} (condition estimate {cond:e})")]
    SingularDesign { t: usize, h: f64, cond: f64 },

    #[error("singular regression design: {0}")]
    RankDeficient(String),

    #[error("no admissible bandwidth on the grid")]
    NoAdmissibleBandwidth,

    #[error("undefined optimum: {0}")]
    UndefinedOptimum(String),

    #[error("{context}: no convergence after {iterations} iterations (last change {last_change:e})")]
    Convergence {
        context: String,
        iterations: usize,
        last_change: f64,
    },

    #[error("degenerate group {group} at t={t}: zero Gram entry")]
    DegenerateGroup { group: usize, t: usize },

    #[error("degenerate long-run variance with nonzero mean differential")]
    DegenerateVariance,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("too many failed replications: {failed} of {reps}")]
    ReplicationFailures { failed: usize, reps: usize },
}

impl Error {
    /// Stable machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::InsufficientData(_) => "insufficient_data",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateScale(_) => "degenerate_scale",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::TimeOutOfRange { .. } => "time_out_of_range",
            Error::WindowTooSmall { .. } => "window_too_small",
            Error::SingularDesign { .. } => "singular_design",
            Error::RankDeficient(_) => "rank_deficient",
            Error::NoAdmissibleBandwidth => "no_admissible_bandwidth",
            Error::UndefinedOptimum(_) => "undefined_optimum",
            Error::Convergence { .. } => "convergence",
            Error::DegenerateGroup { .. } => "degenerate_group",
            Error::DegenerateVariance => "degenerate_variance",
            Error::Domain(_) => "domain",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Estimation(_) => "estimation",
            Error::ReplicationFailures { .. } => "replication_failures",
        }
    }

    /// Location detail (row/column, time index) when the error carries one.
    pub fn location(&self) -> Option<String> {
        match self {
            Error::Parse { row, column, .. } => Some(format!("row {row}, column {column}")),
            Error::TimeOutOfRange { t, .. }
            | Error::WindowTooSmall { t, .. }
            | Error::SingularDesign { t, .. } => Some(format!("t={t}")),
            Error::DegenerateGroup { group, t } => Some(format!("group {group}, t={t}")),
            Error::DegenerateScale(col) => Some(format!("column {col}")),
            _ => None,
        }
    }

    /// Singular or undersized local designs; bandwidth search treats these as
    /// disqualified candidates rather than hard failures.
    pub fn is_design_failure(&self) -> bool {
        matches!(
            self,
            Error::SingularDesign { .. } | Error::WindowTooSmall { .. }
        )
    }
}
