use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = VsrError> = std::result::Result<T, E>;

/// Coarse failure class, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    BadArguments,
    Data,
    Runtime,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::BadArguments => 2,
            Category::Data => 3,
            Category::Runtime => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::BadArguments => "bad-arguments",
            Category::Data => "data",
            Category::Runtime => "runtime",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VsrError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: cannot decode image: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] vsr_core::Error),
}

impl VsrError {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        VsrError::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        VsrError::Format { path: path.as_ref().to_path_buf(), message: message.into() }
    }

    pub fn category(&self) -> Category {
        match self {
            VsrError::Config(_) | VsrError::Core(vsr_core::Error::Config(_)) => Category::BadArguments,
            VsrError::Io { .. } | VsrError::Image { .. } | VsrError::Format { .. } | VsrError::Data(_) => {
                Category::Data
            }
            VsrError::Core(_) => Category::Data,
            VsrError::Runtime(_) => Category::Runtime,
        }
    }

    /// The single-line form printed by the command line.
    pub fn render(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error: category={} message={msg}", self.category().as_str())
    }
}

/// Attaches a path to IO errors.
pub trait IoContext<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T> {
        self.map_err(|e| VsrError::io(path, e))
    }
}
