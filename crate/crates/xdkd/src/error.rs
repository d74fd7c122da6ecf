use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] xdkd_core::Error),
}

impl Error {
    /// Process exit status: 1 config, 2 I/O, 3 numerical failure, 4 verification.
    pub fn exit_code(&self) -> i32 {
        use xdkd_core::Error as C;
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } => 2,
            Error::Core(C::Divergence { .. } | C::NonFinite(_)) => 3,
            Error::Core(C::Verification(_)) => 4,
            Error::Core(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}
