use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding a model file.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic: expected \"VDIP\"")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated model file: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("inconsistent shape: {0}")]
    Shape(String),
    #[error("unknown activation tag {0}")]
    Activation(u8),
}

/// Failures reported by a prediction oracle.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("query budget exhausted: {used} of {budget} sample queries used, {requested} more requested")]
    BudgetExceeded { used: u64, budget: u64, requested: u64 },
    #[error("oracle unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("oracle rejected query: {0}")]
    Rejected(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite input at row {row}, column {col}")]
    NumericInput { row: usize, col: usize },
    #[error("label {label} out of range for {classes} classes (row {row})")]
    Label { row: usize, label: usize, classes: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged in epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("column not found: {0}")]
    ColumnNotFound(String),
    #[error("non-numeric cell {value:?} at row {row}, column {column:?}")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("sample-size error: requested {requested}, pool holds {available}")]
    SampleSize { requested: usize, available: usize },
    #[error("insufficient shadow observations: {0}")]
    InsufficientShadows(String),
    #[error("shadow coverage error: sample {sample} has {in_count} in-models and {out_count} out-models; use more shadow models")]
    Coverage { sample: usize, in_count: usize, out_count: usize },
    #[error("oracle failure at query {index}: {source}")]
    Oracle {
        index: usize,
        #[source]
        source: OracleError,
    },
    #[error("model file: {0}")]
    Parse(#[from] ParseError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArchitecture(_) => "invalid_architecture",
            Error::Shape(_) => "shape",
            Error::NumericInput { .. } => "numeric_input",
            Error::Label { .. } => "label",
            Error::Data(_) => "data",
            Error::Divergence { .. } => "divergence",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::ColumnNotFound(_) => "column_not_found",
            Error::NonNumeric { .. } => "non_numeric",
            Error::SampleSize { .. } => "sample_size",
            Error::InsufficientShadows(_) => "insufficient_shadows",
            Error::Coverage { .. } => "coverage",
            Error::Oracle { .. } => "oracle",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
