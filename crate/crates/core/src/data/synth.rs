//! Synthetic color-blob datasets.
//!
//! Each class owns a base color on a hue circle whose radius scales with
//! `separation`; images add a smooth low-frequency field and optional pixel
//! noise. The class signal is the global color statistic, so it survives
//! aggressive random crops.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assemble, DataError, DatasetHandle, DatasetKind, ImageU8, Result, Split};
use crate::util::{self, tags};

const MAGIC: &[u8; 8] = b"RMSYNTH1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Scales the distance between class colors; > 0.
    pub separation: f64,
    /// Uniform pixel noise amplitude as a fraction of the byte range.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            per_class: 500,
            image_size: 16,
            separation: 1.5,
            noise: 0.08,
            seed: 1,
        }
    }
}

fn class_color(k: usize, classes: usize, separation: f64) -> [f64; 3] {
    let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
    let amp = (separation * 40.0).clamp(0.0, 110.0);
    [
        128.0 + amp * angle.cos(),
        128.0 + amp * angle.sin(),
        128.0 + amp * (2.0 * angle).cos() * 0.5,
    ]
}

fn gen_split(spec: &SynthSpec, split_seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let s = spec.image_size;
    let mut split = Split::default();
    for k in 0..spec.classes {
        let base = class_color(k, spec.classes, spec.separation);
        for _ in 0..spec.per_class {
            let fx = rng.gen_range(1..=2) as f64;
            let fy = rng.gen_range(1..=2) as f64;
            let (phix, phiy) = (
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let amp_field = 12.0;
            let mut pixels = vec![0u8; s * s * 3];
            for y in 0..s {
                for x in 0..s {
                    let field = amp_field
                        * (std::f64::consts::TAU * fx * x as f64 / s as f64 + phix).sin()
                        * (std::f64::consts::TAU * fy * y as f64 / s as f64 + phiy).cos();
                    for c in 0..3 {
                        let noise = if spec.noise > 0.0 {
                            rng.gen_range(-spec.noise..spec.noise) * 255.0
                        } else {
                            0.0
                        };
                        let v = (base[c] + field + noise).clamp(0.0, 255.0);
                        pixels[(y * s + x) * 3 + c] = v as u8;
                    }
                }
            }
            split.images.push(ImageU8::new(s, s, pixels).expect("square image"));
            split.labels.push(k as u16);
        }
    }
    split
}

/// Deterministic class-conditioned blob dataset with a held-out test split
/// (one fifth of the train size per class, at least one).
pub fn synth_blobs(spec: &SynthSpec) -> Result<DatasetHandle> {
    if spec.classes < 2 {
        return Err(DataError::InvalidParams("need at least 2 classes".into()));
    }
    if spec.separation <= 0.0 {
        return Err(DataError::InvalidParams("separation must be > 0".into()));
    }
    if spec.per_class == 0 || spec.image_size < 2 {
        return Err(DataError::InvalidParams(
            "per_class must be >= 1 and image_size >= 2".into(),
        ));
    }
    let train = gen_split(spec, util::subseed(spec.seed, tags::SYNTH));
    let test_spec = SynthSpec {
        per_class: (spec.per_class / 5).max(1),
        ..*spec
    };
    let test = gen_split(&test_spec, util::subseed(spec.seed, tags::SYNTH ^ 0xff));
    Ok(assemble(DatasetKind::Synthetic, spec.classes, train, test))
}

/// Serializes a dataset to a raw header+bytes file for reproducibility.
pub fn save_raw(path: &Path, ds: &DatasetHandle) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(ds.class_count as u32).to_le_bytes());
    let size = ds.train.images.first().map_or(0, |i| i.height) as u32;
    out.extend_from_slice(&size.to_le_bytes());
    out.extend_from_slice(&(ds.train.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.test.len() as u32).to_le_bytes());
    for split in [&ds.train, &ds.test] {
        for (img, &label) in split.images.iter().zip(&split.labels) {
            out.extend_from_slice(&label.to_le_bytes());
            out.extend_from_slice(&img.pixels);
        }
    }
    fs::write(path, out).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_raw(path: &Path) -> Result<DatasetHandle> {
    let bytes = fs::read(path).map_err(|_| DataError::MissingFile {
        path: path.to_path_buf(),
    })?;
    let fail = || DataError::TruncatedRecord {
        path: path.to_path_buf(),
        len: bytes.len() as u64,
        record: 0,
    };
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(fail());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let class_count = u32_at(8);
    let size = u32_at(12);
    let n_train = u32_at(16);
    let n_test = u32_at(20);
    let record = 2 + size * size * 3;
    if bytes.len() != 24 + (n_train + n_test) * record {
        return Err(fail());
    }
    let mut off = 24;
    let mut read_split = |n: usize| -> Result<Split> {
        let mut split = Split::default();
        for _ in 0..n {
            let label = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap());
            if label as usize >= class_count {
                return Err(DataError::LabelOutOfRange {
                    label,
                    max: class_count.saturating_sub(1) as u16,
                });
            }
            let px = bytes[off + 2..off + record].to_vec();
            split.images.push(ImageU8::new(size, size, px).expect("validated size"));
            split.labels.push(label);
            off += record;
        }
        Ok(split)
    };
    let train = read_split(n_train)?;
    let test = read_split(n_test)?;
    Ok(assemble(DatasetKind::Synthetic, class_count, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let spec = SynthSpec { per_class: 6, ..Default::default() };
        let a = synth_blobs(&spec).unwrap();
        let b = synth_blobs(&spec).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        let c = synth_blobs(&SynthSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.fingerprint, c.fingerprint);
    }

    #[test]
    fn labels_are_uniform_per_class() {
        let spec = SynthSpec { classes: 5, per_class: 7, ..Default::default() };
        let ds = synth_blobs(&spec).unwrap();
        for k in 0..5u16 {
            let n = ds.train.labels.iter().filter(|&&l| l == k).count();
            assert_eq!(n, 7);
        }
        assert_eq!(ds.test.len(), 5 * (7 / 5).max(1));
    }

    #[test]
    fn noiseless_separated_blobs_are_centroid_separable() {
        let spec = SynthSpec {
            classes: 4,
            per_class: 20,
            image_size: 8,
            separation: 3.0,
            noise: 0.0,
            seed: 9,
        };
        let ds = synth_blobs(&spec).unwrap();
        // Nearest-centroid classifier on raw pixels.
        let dim = 8 * 8 * 3;
        let mut centroids = vec![vec![0.0f64; dim]; 4];
        let mut counts = [0usize; 4];
        for (img, &l) in ds.train.images.iter().zip(&ds.train.labels) {
            for (c, &p) in centroids[l as usize].iter_mut().zip(&img.pixels) {
                *c += p as f64;
            }
            counts[l as usize] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut correct = 0usize;
        for (img, &l) in ds.train.images.iter().zip(&ds.train.labels) {
            let mut best = (f64::INFINITY, 0usize);
            for (k, c) in centroids.iter().enumerate() {
                let d: f64 = c
                    .iter()
                    .zip(&img.pixels)
                    .map(|(cv, &p)| (cv - p as f64).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            if best.1 == l as usize {
                correct += 1;
            }
        }
        assert_eq!(correct, ds.train.len(), "nearest centroid must be perfect");
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(synth_blobs(&SynthSpec { classes: 1, ..Default::default() }).is_err());
        assert!(synth_blobs(&SynthSpec { separation: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn raw_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.bin");
        let ds = synth_blobs(&SynthSpec { per_class: 5, ..Default::default() }).unwrap();
        save_raw(&path, &ds).unwrap();
        let back = load_raw(&path).unwrap();
        assert_eq!(ds.fingerprint, back.fingerprint);
        assert_eq!(ds.train.labels, back.train.labels);

        // Saving twice produces identical bytes.
        let path2 = dir.path().join("blobs2.bin");
        save_raw(&path2, &ds).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

        // Corrupt tail fails.
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(load_raw(&path).is_err());
    }
}
