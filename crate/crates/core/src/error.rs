use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library reports. Variants carry enough identity
/// (source, trial, path, stage) to locate the offending record.
#[derive(Debug, Error)]
pub enum Error {
    #[error("source {source_id} trial {trial_uid}: {rows} signal rows but {names} channel names")]
    ShapeMismatch {
        source_id: usize,
        trial_uid: u64,
        rows: usize,
        names: usize,
    },

    #[error("source {source_id} trial {trial_uid}: channel {channel:?} is not in the source manifest")]
    UnknownChannel {
        source_id: usize,
        trial_uid: u64,
        channel: String,
    },

    #[error("source {source_id} trial {trial_uid}: non-finite sample at channel {channel}, index {index}")]
    NonFinite {
        source_id: usize,
        trial_uid: u64,
        channel: usize,
        index: usize,
    },

    #[error("source {source_id} trial {trial_uid}: label does not match scheme {scheme}")]
    LabelScheme {
        source_id: usize,
        trial_uid: u64,
        scheme: String,
    },

    #[error("missing channel {0:?}")]
    MissingChannel(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("signal processing: {0}")]
    Signal(String),

    #[error("unknown emotion state {0:?}")]
    UnknownState(String),

    #[error("clustering: {0}")]
    Clustering(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("shape: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
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

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Wrap with the pipeline stage that produced the failure.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures caused by user-supplied configuration or manifests
    /// rather than by data or runtime conditions.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Manifest(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
