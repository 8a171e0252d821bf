use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config `{key}`: {msg}")]
    InvalidConfig { key: String, msg: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config key `{key}` has the wrong type: {msg}")]
    ConfigType { key: String, msg: String },

    #[error("unsupported schema version {found} in {path} (expected {expected})")]
    SchemaVersion { path: PathBuf, found: u64, expected: u64 },

    #[error("malformed {path}: {msg}")]
    Schema { path: PathBuf, msg: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing prerequisite artifact {0}")]
    Dependency(PathBuf),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(String),
}

impl Error {
    pub(crate) fn invalid_config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::InvalidConfig { key: key.into(), msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
