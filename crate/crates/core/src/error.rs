//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty bag")]
    EmptyBag,
    #[error("empty group")]
    EmptyGroup,
    #[error("unrecognized bag file: {0}")]
    UnrecognizedBagFile(String),
    #[error("corrupt bag file: {0}")]
    CorruptBagFile(String),
    #[error("witness rate too low for bag size")]
    WitnessRateTooLow,
    #[error("more groups than instances")]
    MoreGroupsThanInstances,
    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),
    #[error("unknown ablation axis `{0}`")]
    UnknownAxis(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("policy divergence: {0}")]
    PolicyDivergence(String),
    #[error("PPO divergence: {0}")]
    PpoDivergence(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedCheckpointVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("empty split `{0}`")]
    EmptySplit(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
