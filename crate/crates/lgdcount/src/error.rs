use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lgd_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// Process exit status: 2 usage, 3 data, 4 degenerate support.
    pub fn exit_code(&self) -> i32 {
        use lgd_core::Error as E;
        match self {
            Error::Usage(_) => 2,
            Error::Core(E::UnknownKey(_) | E::InvalidValue { .. } | E::InvalidHyperparameter(_)) => 2,
            Error::Core(E::DegenerateSupport { .. } | E::AllSamplesDegenerate) => 4,
            _ => 3,
        }
    }
}
