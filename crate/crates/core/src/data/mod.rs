//! Dataset ingestion, two-view augmentation and deterministic batching.
//!
//! Datasets are byte-level deterministic: the whole data stream a training
//! run sees is a pure function of (dataset bytes, epoch seed). Labels are
//! carried for evaluation only; pretraining batches expose augmented views
//! and never labels.

mod augment;
mod batch;
mod cifar;
mod synth;

pub use augment::{make_views, solarize_value, AugmentParams, ViewPair};
pub use batch::{eval_batches, make_view_batch, pretrain_batches, sample_seed, shuffled_indices};
pub use cifar::{load_cifar10, load_cifar100};
pub use synth::{load_raw, save_raw, synth_blobs, SynthSpec};

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq)]
pub enum DataError {
    MissingFile { path: PathBuf },
    /// File length is not a whole number of records.
    TruncatedRecord { path: PathBuf, len: u64, record: usize },
    LabelOutOfRange { label: u16, max: u16 },
    BatchTooLarge { batch: usize, available: usize },
    InvalidParams(String),
    Io { path: PathBuf, message: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingFile { path } => write!(f, "dataset file not found: {}", path.display()),
            Self::TruncatedRecord { path, len, record } => write!(
                f,
                "{}: length {len} is not a multiple of the {record}-byte record",
                path.display()
            ),
            Self::LabelOutOfRange { label, max } => {
                write!(f, "label {label} exceeds maximum {max}")
            }
            Self::BatchTooLarge { batch, available } => {
                write!(f, "batch size {batch} exceeds dataset size {available}")
            }
            Self::InvalidParams(msg) => write!(f, "invalid parameters: {msg}"),
            Self::Io { path, message } => write!(f, "{}: {message}", path.display()),
        }
    }
}

impl std::error::Error for DataError {}

/// 8-bit RGB image, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageU8 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(DataError::InvalidParams(format!(
                "image {height}x{width} needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(ImageU8 { height, width, pixels })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub images: Vec<ImageU8>,
    pub labels: Vec<u16>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-channel normalization statistics on the [0, 1] pixel scale, computed
/// once from the train split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub struct DatasetHandle {
    pub kind: DatasetKind,
    pub class_count: usize,
    pub train: Split,
    pub test: Split,
    pub stats: ChannelStats,
    /// Content hash over every image byte and label of both splits.
    pub fingerprint: String,
}

pub(crate) fn channel_stats(train: &Split) -> ChannelStats {
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut count = 0u64;
    for img in &train.images {
        for px in img.pixels.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
        count += (img.height * img.width) as u64;
    }
    let n = (count.max(1)) as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n;
        let var = (sum_sq[c] / n - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt().max(1e-3);
    }
    ChannelStats { mean, std }
}

pub(crate) fn fingerprint(kind: DatasetKind, class_count: usize, splits: &[&Split]) -> String {
    let mut hasher = Sha256::new();
    hasher.update([kind as u8]);
    hasher.update((class_count as u64).to_le_bytes());
    for split in splits {
        hasher.update((split.len() as u64).to_le_bytes());
        for (img, &label) in split.images.iter().zip(&split.labels) {
            hasher.update(label.to_le_bytes());
            hasher.update(&img.pixels);
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn assemble(
    kind: DatasetKind,
    class_count: usize,
    train: Split,
    test: Split,
) -> DatasetHandle {
    let stats = channel_stats(&train);
    let fingerprint = fingerprint(kind, class_count, &[&train, &test]);
    DatasetHandle {
        kind,
        class_count,
        train,
        test,
        stats,
        fingerprint,
    }
}
