use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid geometry in {op}: {msg}")]
    Geometry { op: &'static str, msg: String },

    /// A structural or shape problem attributed to a specific network node.
    #[error("node `{node}`: {msg}")]
    Node { node: String, msg: String },

    #[error("cycle detected in network graph at node `{0}`")]
    Cycle(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("frozen state does not match network: {0}")]
    StateMismatch(String),

    #[error("materialization budget exceeded: {required} entries > budget {budget}")]
    BudgetExceeded { required: usize, budget: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rop/lop adjoint spot-check failed: relative error {0:e}")]
    AdjointCheck(f64),

    #[error("strategies `{a}` and `{b}` disagree: relative error {rel_err:e}")]
    StrategyDisagreement {
        a: String,
        b: String,
        rel_err: f64,
    },

    /// Malformed file contents (`.ten` payloads, network JSON schema violations).
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn node(node: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Node {
            node: node.into(),
            msg: msg.into(),
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
