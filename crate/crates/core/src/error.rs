use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("{op}: bad shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("site `{site}` keeps no channels; the extracted network would be disconnected")]
    Disconnected { site: String },
    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: String, detail: String },
    #[error("controller fault: {0}")]
    Controller(String),
    #[error("container format: {0}")]
    Format(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, what: impl Into<String>, expected: usize, got: usize) -> Error {
    Error::ShapeMismatch {
        op,
        what: what.into(),
        expected,
        got,
    }
}
