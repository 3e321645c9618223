use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file is structurally inconsistent with its siblings (line count,
    /// values per line, missing file).
    #[error("structure error in {path}{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Structure {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("parse error in {path} line {line} token {token}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        token: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("window of {window_s} s does not divide the {frame_s} s frame; valid windows: {valid:?}")]
    InvalidWindow {
        window_s: f64,
        frame_s: f64,
        valid: Vec<f64>,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value during training at epoch {epoch}, batch {batch}: {what}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        what: String,
    },

    #[error("class {class} has {count} frame(s); stratified split needs at least 2")]
    ClassTooSmall { class: u8, count: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("cache entry {key} was written for a different input ({detail}); purge the cache directory and rerun")]
    StaleCache { key: String, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
