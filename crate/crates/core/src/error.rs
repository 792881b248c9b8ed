use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate series `{0}`: fewer than 2 non-missing values")]
    DegenerateSeries(String),

    #[error("domain error in `{series}` at year {year}: {reason}")]
    Domain {
        series: String,
        year: i32,
        reason: String,
    },

    #[error("year {0} outside the supported range 1..=2000")]
    YearOutOfRange(i32),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("year coverage mismatch: {0}")]
    Coverage(String),

    #[error("singular precision matrix: null direction at parameter `{0}`")]
    Singular(String),

    #[error("optimizer did not converge: {0}")]
    NoConvergence(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("{0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
