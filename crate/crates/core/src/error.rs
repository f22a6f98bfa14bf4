use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch in {op} at node {node}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        lhs: String,
        rhs: String,
    },

    #[error("gradient requested of non-scalar output {0}")]
    NonScalarOutput(String),

    #[error("node {0} is a constant and has no gradient")]
    NotDifferentiable(usize),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("could not place {requested} objects in bounds after {attempts} attempts")]
    Placement { requested: usize, attempts: usize },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
