use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no cached verdict for video `{video_id}`, question `{question_id}`")]
    MissingVerdict {
        video_id: String,
        question_id: String,
    },

    #[error("verdict backend failed after {attempts} attempt(s): {reason}")]
    Backend { attempts: u32, reason: String },

    #[error("group error: {0}")]
    Group(String),

    #[error("duplicate key `{0}`")]
    Duplicate(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("video `{video_id}`: {source}")]
    Video {
        video_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn for_video(video_id: &str, source: Error) -> Self {
        Error::Video {
            video_id: video_id.to_string(),
            source: Box::new(source),
        }
    }

    /// Innermost error, looking through per-video context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Video { source, .. } => source.root(),
            other => other,
        }
    }
}
