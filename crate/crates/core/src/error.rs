use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum CstError {
    #[error("{op}: dimension mismatch, {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    Numeric { op: &'static str },
    #[error("graph: {0}")]
    Graph(String),
    #[error("function is not deterministic across probe calls")]
    Determinism,
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CstError {
    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        CstError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Configuration-class errors map to CLI exit code 2, everything else to 3.
    pub fn is_config(&self) -> bool {
        matches!(self, CstError::Config(_))
    }
}

pub type Result<T, E = CstError> = std::result::Result<T, E>;
