use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}: unparseable timestamp {value:?}")]
    Timestamp { row: usize, value: String },

    #[error("row {row}: duplicate observation for site {site} at {timestamp}")]
    Duplicate {
        row: usize,
        site: String,
        timestamp: String,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("formula error: {0}")]
    Formula(String),

    #[error("design has no complete rows ({dropped} dropped for missing values)")]
    EmptyDesign { dropped: usize },

    #[error("ordering error in group {group}: times must strictly increase (position {position})")]
    Ordering { group: String, position: usize },

    #[error("singular design: column(s) {} collinear with preceding columns", columns.join(", "))]
    Singular { columns: Vec<String> },

    #[error("optimizer did not converge after {iterations} iterations (best phi {best_phi}, objective {best_value})")]
    Convergence {
        iterations: usize,
        best_phi: f64,
        best_value: f64,
    },

    #[error("no confidence interval: {0}")]
    NoInterval(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical pipeline rather than of user input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. }
                | Error::Convergence { .. }
                | Error::NoInterval(_)
                | Error::Consistency(_)
        )
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
