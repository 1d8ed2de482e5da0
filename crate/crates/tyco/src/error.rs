use std::io;
use std::path::PathBuf;

/// Errors of the std layer. [`Error::exit_code`] maps them to the process
/// exit status.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A config or resource file that does not match its schema.
    #[error("{file}: at `{path}`: {msg}")]
    Schema { file: String, path: String, msg: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{file}:{line}: {msg}")]
    Format { file: String, line: usize, msg: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] tyco_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// 1 for invalid input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use tyco_core::Error as C;
        match self {
            Error::Schema { .. } | Error::Invalid(_) | Error::Format { .. } | Error::Version { .. } | Error::Incompatible(_) => 1,
            Error::Io { .. } => 2,
            Error::Core(e) => match e {
                C::Config(_) | C::UnknownLanguage(_) | C::UnknownToken(_) | C::Empty(_) | C::LengthMismatch(_) | C::InvalidLabel(_) => 1,
                C::Shape { .. } | C::NonFinite(_) | C::TooLarge(_) | C::Divergence { .. } => 2,
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
