//! CIFAR binary-batch readers.
//!
//! CIFAR-10 records are 3073 bytes: one label byte then 3072 pixel bytes in
//! planar RGB order (three 1024-byte planes of a 32x32 image). CIFAR-100
//! records are 3074 bytes with a coarse and a fine label byte; the fine
//! label is used.

use std::fs;
use std::path::{Path, PathBuf};

use super::{assemble, DataError, DatasetHandle, DatasetKind, ImageU8, Result, Split};

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const PIXELS: usize = 3 * PLANE;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(DataError::MissingFile { path: path.to_path_buf() });
    }
    fs::read(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Converts one planar-RGB pixel block into a channel-last image.
fn decode_pixels(planar: &[u8]) -> ImageU8 {
    let mut pixels = vec![0u8; PIXELS];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let p = y * SIDE + x;
            pixels[p * 3] = planar[p];
            pixels[p * 3 + 1] = planar[PLANE + p];
            pixels[p * 3 + 2] = planar[2 * PLANE + p];
        }
    }
    ImageU8::new(SIDE, SIDE, pixels).expect("fixed 32x32x3 layout")
}

fn parse_batch(
    path: &Path,
    label_bytes: usize,
    label_index: usize,
    max_label: u16,
    split: &mut Split,
) -> Result<()> {
    let bytes = read_file(path)?;
    let record = label_bytes + PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(DataError::TruncatedRecord {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record,
        });
    }
    for rec in bytes.chunks_exact(record) {
        let label = rec[label_index] as u16;
        if label > max_label {
            return Err(DataError::LabelOutOfRange { label, max: max_label });
        }
        split.labels.push(label);
        split.images.push(decode_pixels(&rec[label_bytes..]));
    }
    Ok(())
}

/// Loads the standard binary batches `data_batch_{1..5}.bin` and
/// `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<DatasetHandle> {
    let mut train = Split::default();
    for i in 1..=5 {
        let path: PathBuf = dir.join(format!("data_batch_{i}.bin"));
        parse_batch(&path, 1, 0, 9, &mut train)?;
    }
    let mut test = Split::default();
    parse_batch(&dir.join("test_batch.bin"), 1, 0, 9, &mut test)?;
    Ok(assemble(DatasetKind::Cifar10, 10, train, test))
}

/// Loads `train.bin` and `test.bin`; the coarse label byte is ignored.
pub fn load_cifar100(dir: &Path) -> Result<DatasetHandle> {
    let mut train = Split::default();
    parse_batch(&dir.join("train.bin"), 2, 1, 99, &mut train)?;
    let mut test = Split::default();
    parse_batch(&dir.join("test.bin"), 2, 1, 99, &mut test)?;
    Ok(assemble(DatasetKind::Cifar100, 100, train, test))
}

#[cfg(test)]
pub(crate) fn write_fake_cifar10(dir: &Path, per_file: usize) {
    let names: Vec<String> = (1..=5)
        .map(|i| format!("data_batch_{i}.bin"))
        .chain(std::iter::once("test_batch.bin".into()))
        .collect();
    for (fi, name) in names.iter().enumerate() {
        let mut bytes = Vec::with_capacity(per_file * 3073);
        for r in 0..per_file {
            bytes.push(((fi + r) % 10) as u8);
            for p in 0..PIXELS {
                bytes.push(((fi * 31 + r * 7 + p) % 256) as u8);
            }
        }
        fs::write(dir.join(name), bytes).unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_arithmetic() {
        // 3073 = 1 + 3 * 32 * 32 and a full batch file is 10000 records.
        assert_eq!(1 + PIXELS, 3073);
        assert_eq!(10000 * 3073, 30_730_000);
        assert_eq!(2 + PIXELS, 3074);
    }

    #[test]
    fn loads_synthesized_batches() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar10(dir.path(), 8);
        let ds = load_cifar10(dir.path()).unwrap();
        assert_eq!(ds.class_count, 10);
        assert_eq!(ds.train.len(), 40);
        assert_eq!(ds.test.len(), 8);
        // Planar decode: channels of pixel p come from bytes p, 1024+p, 2048+p.
        let img = &ds.train.images[0];
        assert_eq!(img.get(0, 0, 0) as usize, 0);
        assert_eq!(img.get(0, 0, 1) as usize, 1024 % 256);
        assert_eq!(img.get(0, 0, 2) as usize, 2048 % 256);
    }

    #[test]
    fn missing_file_and_truncation_and_label_range() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_cifar10(dir.path()),
            Err(DataError::MissingFile { .. })
        ));

        write_fake_cifar10(dir.path(), 4);
        let victim = dir.path().join("data_batch_2.bin");
        let mut bytes = fs::read(&victim).unwrap();
        bytes.pop();
        fs::write(&victim, &bytes).unwrap();
        assert!(matches!(
            load_cifar10(dir.path()),
            Err(DataError::TruncatedRecord { record: 3073, .. })
        ));

        write_fake_cifar10(dir.path(), 4);
        let victim = dir.path().join("data_batch_1.bin");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[0] = 10; // label out of range
        fs::write(&victim, &bytes).unwrap();
        assert!(matches!(
            load_cifar10(dir.path()),
            Err(DataError::LabelOutOfRange { label: 10, max: 9 })
        ));
    }

    #[test]
    fn cifar100_uses_fine_label_and_ignores_coarse() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for r in 0..6u16 {
            bytes.push(255); // coarse byte is junk by design
            bytes.push((r * 13 % 100) as u8);
            bytes.extend(std::iter::repeat(7u8).take(PIXELS));
        }
        fs::write(dir.path().join("train.bin"), &bytes).unwrap();
        fs::write(dir.path().join("test.bin"), &bytes).unwrap();
        let ds = load_cifar100(dir.path()).unwrap();
        assert_eq!(ds.class_count, 100);
        let expect: Vec<u16> = (0..6).map(|r| r * 13 % 100).collect();
        assert_eq!(ds.train.labels, expect);

        // Fine label out of range.
        let mut bad = bytes.clone();
        bad[1] = 100;
        fs::write(dir.path().join("train.bin"), &bad).unwrap();
        assert!(matches!(
            load_cifar100(dir.path()),
            Err(DataError::LabelOutOfRange { label: 100, max: 99 })
        ));
    }
}
