//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong between raw text and a finished evaluation.
///
/// File-format problems are deliberately split three ways so callers can tell
/// apart "not one of our files" ([`Error::Format`]), "one of our files, but
/// damaged" ([`Error::Checksum`]), and "valid files that do not belong
/// together" ([`Error::Incompatible`]).
#[derive(Debug, Error)]
pub enum Error {
    /// An underlying I/O failure, tagged with the path being touched.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file failed structural validation: wrong magic, unsupported version,
    /// truncated section, or a field with an impossible value.
    #[error("malformed {what} file {path}: {detail}")]
    Format {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },

    /// A file parsed but its stored digest does not match its contents.
    #[error("checksum mismatch in {path}: header says {stored}, contents hash to {computed}")]
    Checksum {
        path: PathBuf,
        stored: String,
        computed: String,
    },

    /// Two artifacts cannot be used together, e.g. a datastore built from a
    /// different checkpoint than the one currently loaded.
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    /// A configuration value is out of range or inconsistent with another.
    #[error("invalid config: {0}")]
    Config(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("{stage} training diverged at step {step}: loss is not finite")]
    Diverged { stage: &'static str, step: usize },

    /// A pipeline stage failed; artifacts from completed stages remain on
    /// disk, so fixing the cause and re-running resumes from this stage.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an I/O error with the path that produced it.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for a structural file-format error.
    pub fn format(what: &'static str, path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            path: path.into(),
            detail: detail.into(),
        }
    }
}
