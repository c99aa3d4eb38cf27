use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] bisgan_core::Error),
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("malformed corpus at {}: {reason}", .path.display())]
    MalformedCorpus { path: PathBuf, reason: String },
    #[error("cannot decode {}: {reason}", .path.display())]
    DecodeError { path: PathBuf, reason: String },
    #[error("corrupt checkpoint {}: {reason}", .path.display())]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint was written under config digest {found}, current config hashes to {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("bad config {}: {reason}", .path.display())]
    Config { path: PathBuf, reason: String },
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unreadable forgery sources:\n  {}", .0.join("\n  "))]
    BadSources(Vec<String>),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Process exit status: 3 for divergence, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(bisgan_core::Error::Divergence { .. }) => 3,
            _ => 2,
        }
    }
}
