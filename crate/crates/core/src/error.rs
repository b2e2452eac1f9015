use std::fmt;

/// Library result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the numerics, policy, profiling, engine and trace layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("dimension mismatch in {operand}: expected {expected}, found {found}")]
    DimensionMismatch {
        operand: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid attention map: {0}")]
    InvalidAttentionMap(String),

    #[error("missing data for layer {layer} head {head}")]
    MissingHead { layer: usize, head: usize },

    #[error("cache/profile mismatch: {0}")]
    CacheMismatch(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("trace dimension mismatch: {0}")]
    TraceDimension(String),

    #[error("trace exhausted at position {0}")]
    TraceExhausted(usize),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("policy syntax: {0}")]
    PolicySyntax(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn mismatch(
        operand: &'static str,
        expected: impl fmt::Display,
        found: impl fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            operand,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Short stable identifier used by the CLI's one-line error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyInput => "empty_input",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::InvalidAttentionMap(_) => "invalid_attention_map",
            Error::MissingHead { .. } => "missing_head",
            Error::CacheMismatch(_) => "cache_mismatch",
            Error::MalformedHeader(_) => "malformed_header",
            Error::TruncatedPayload(_) => "truncated_payload",
            Error::TraceDimension(_) => "trace_dimension",
            Error::TraceExhausted(_) => "trace_exhausted",
            Error::Parse { .. } => "parse",
            Error::PolicySyntax(_) => "policy_syntax",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
