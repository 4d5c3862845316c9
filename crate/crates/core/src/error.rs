use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}: cannot parse `{value}` in numeric column `{column}`")]
    NumericParse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: {message}")]
    InvalidCell { row: usize, message: String },

    #[error("row {row}: label `{value}` is not 0 or 1")]
    Label { row: usize, value: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("feature `{0}` does not match the fitted schema")]
    FeatureMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("line {line}, column {column}: {message}")]
    RuleSyntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("rule binding error: {0}")]
    RuleBinding(String),

    #[error("coverage undefined: {0}")]
    Coverage(String),

    #[error("pair (y={y}, e={e}) was not observed at fit time")]
    UnobservedPair { y: u8, e: u8 },

    #[error("feature width mismatch: expected {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed user input (config, rules, schema)
    /// rather than a failure while running a stage.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::RuleSyntax { .. }
                | Error::RuleBinding(_)
                | Error::MissingColumn(_)
                | Error::Schema(_)
                | Error::Json(_)
        )
    }
}
