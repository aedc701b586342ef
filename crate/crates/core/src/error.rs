use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the library.
///
/// The variants are coarse on purpose: the CLI maps them onto exit codes
/// (`Config` → 2, `Data`/`Corrupt`/`Io` → 3, `Numeric` → 4).
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration, inconsistent shapes, or a bad argument.
    Config(String),
    /// Input data unusable for the requested operation (empty corpus, too few windows, ...).
    Data(String),
    /// A NaN/Inf appeared; `op` names the operation that produced it.
    Numeric { op: String, detail: String },
    /// API misuse, e.g. running backward twice on the same graph.
    Usage(String),
    /// A checkpoint or packed blob failed validation.
    Corrupt { section: String, detail: String },
    /// A checkpoint was produced for a different model configuration.
    ConfigMismatch { expected: String, found: String },
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn corrupt(section: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Corrupt {
            section: section.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "configuration error: {msg}"),
            Self::Data(msg) => write!(f, "data error: {msg}"),
            Self::Numeric { op, detail } => write!(f, "numeric failure in {op}: {detail}"),
            Self::Usage(msg) => write!(f, "usage error: {msg}"),
            Self::Corrupt { section, detail } => {
                write!(f, "corrupt data in section `{section}`: {detail}")
            }
            Self::ConfigMismatch { expected, found } => {
                write!(f, "config mismatch: expected {expected}, found {found}")
            }
            Self::Io { path, source } => write!(f, "{path}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
