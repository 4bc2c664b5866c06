//! Run persistence: config files, the run manifest, binary checkpoints and
//! the append-only metrics stream.
//!
//! The run id is a content hash of (canonical config, dataset fingerprint),
//! so identical configurations produce identical ids and byte-identical
//! artifacts; wall-clock time lives only in the manifest.

mod checkpoint;
mod config;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, TrainState};
pub use config::{load_config, save_config, DatasetConfig, RunConfig};
pub use metrics::{
    gap_report_csv, read_metrics, EpochSummary, GapSummary, MetricsLine, MetricsWriter,
};

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Clone, Debug, PartialEq)]
pub enum StoreError {
    Io { path: PathBuf, message: String },
    CorruptCheckpoint(String),
    InvalidConfig(String),
    MalformedMetrics { line: usize, message: String },
    EmptyMetrics,
    /// Output directory already holds a run and `--force` was not given.
    OutputOccupied { path: PathBuf },
}

impl fmt::Display for StoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io { path, message } => write!(f, "{}: {message}", path.display()),
            Self::CorruptCheckpoint(msg) => write!(f, "corrupt checkpoint: {msg}"),
            Self::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Self::MalformedMetrics { line, message } => {
                write!(f, "malformed metrics line {line}: {message}")
            }
            Self::EmptyMetrics => write!(f, "metrics stream holds no step records"),
            Self::OutputOccupied { path } => write!(
                f,
                "output directory {} already holds a run (pass --force to reuse)",
                path.display()
            ),
        }
    }
}

impl std::error::Error for StoreError {}

pub(crate) fn io_err(path: &std::path::Path, e: impl fmt::Display) -> StoreError {
    StoreError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Immutable description of one run; every artifact embeds its `run_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_unix: u64,
    pub code_version: String,
    pub dataset_fingerprint: String,
    pub config: RunConfig,
}

/// Content-derived run id: hash of the canonical config serialization and
/// the dataset fingerprint.
pub fn run_id(config: &RunConfig, dataset_fingerprint: &str) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hasher.update(dataset_fingerprint.as_bytes());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn make_manifest(config: &RunConfig, dataset_fingerprint: &str) -> RunManifest {
    RunManifest {
        run_id: run_id(config, dataset_fingerprint),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset_fingerprint: dataset_fingerprint.to_string(),
        config: config.clone(),
    }
}
