use thiserror::Error;

/// Errors raised across the flexible-optimization toolkit.
#[derive(Debug, Error)]
pub enum FlexError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("uncertainty sample outside [-1, 1] at coordinate {index}: {value}")]
    SampleOutOfBox { index: usize, value: f64 },
    #[error("vertex enumeration refused: n = {n} exceeds the cap of {cap}")]
    OracleCapExceeded { n: usize, cap: usize },
    #[error("{stage} did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence {
        stage: &'static str,
        residual: f64,
        iterations: usize,
    },
    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<FlexError>,
    },
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FlexError> = std::result::Result<T, E>;

impl FlexError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        FlexError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        FlexError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(FlexError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
