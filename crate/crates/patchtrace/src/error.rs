use std::path::PathBuf;

use patchtrace_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("clip {clip_id:?}: {source}")]
    Validation {
        clip_id: String,
        #[source]
        source: CoreError,
    },
    #[error("inconsistent shape: {0}")]
    InconsistentShape(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("no reasoner checkpoint for P={patches}, T={samples_per_patch}")]
    MissingCheckpoint {
        patches: usize,
        samples_per_patch: usize,
    },
    #[error("llm_reasoner needs an endpoint (--base-url and --model)")]
    EndpointUnconfigured,
    #[error("request timed out")]
    Timeout,
    #[error("HTTP status {0}")]
    HttpStatus(u16),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
