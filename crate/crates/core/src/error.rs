use thiserror::Error;

/// Errors raised by the shape-spline library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of an operation (non-finite coordinates,
    /// non-positive widths, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    /// A non-finite value appeared while integrating; `node` is the first grid
    /// node whose state could not be computed.
    #[error("integration diverged at node {node} (t = {time})")]
    Diverged { node: usize, time: f64 },

    #[error("control metric is degenerate: {0}")]
    MetricDegenerate(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    /// Inconsistent problem setup, e.g. an observation that does not sit on a grid node.
    #[error("configuration error: {0}")]
    Config(String),

    /// Schema violation in an input document.
    #[error("validation error at {location}: {message}")]
    Validation { location: String, message: String },

    #[error("unknown {family} '{name}' (available: {available})")]
    UnknownStrategy {
        family: &'static str,
        name: String,
        available: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::Diverged { .. } | Error::MetricDegenerate(_) | Error::DegenerateConfiguration(_)
        )
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::MetricDegenerate(_) => "metric_degenerate",
            Error::DegenerateConfiguration(_) => "degenerate_configuration",
            Error::Config(_) => "config",
            Error::Validation { .. } => "validation",
            Error::UnknownStrategy { .. } => "unknown_strategy",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            actual,
            context,
        })
    }
}
