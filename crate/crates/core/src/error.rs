use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, label, size...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced NaN or an infinity.
    #[error("numeric failure in {context}: node {node} ({op}) is not finite")]
    NumericFailure {
        node: usize,
        op: &'static str,
        context: String,
    },

    /// The sampler cannot assemble a batch from the requested cameras.
    #[error("cannot sample batch from camera(s) {cameras:?}: {reason}")]
    Infeasible { cameras: Vec<u32>, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Attach a human-readable location to a numeric failure.
    pub fn in_context(self, context: &str) -> Self {
        match self {
            Error::NumericFailure { node, op, .. } => Error::NumericFailure {
                node,
                op,
                context: context.to_string(),
            },
            other => other,
        }
    }
}
