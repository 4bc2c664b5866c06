//! Binary checkpoint: JSON header plus raw little-endian f32 blobs.
//!
//! Layout: 8-byte magic, u32 little-endian header length, header JSON, then
//! the blob. The header indexes every record (name, shape, byte offset,
//! element count) covering student and teacher parameters, both BN state
//! sets, and the optimizer buffers; loading reproduces every value bitwise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::momentum::{init_teacher, TeacherState};
use crate::nn::{build_encoder, Encoder};
use crate::train::OptimizerState;

use super::{io_err, Result, RunConfig, StoreError};

const MAGIC: &[u8; 8] = b"RMCKPT01";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Element count (f32).
    pub count: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub run_id: String,
    pub step: u64,
    pub opt_steps: u64,
    pub endianness: String,
    pub config: RunConfig,
    pub records: Vec<RecordMeta>,
}

/// Borrowed view of everything a resumable run needs persisted.
pub struct TrainState<'a> {
    pub run_id: &'a str,
    pub step: u64,
    pub config: &'a RunConfig,
    pub student: &'a Encoder<f32>,
    pub teacher: &'a TeacherState<f32>,
    pub opt: &'a OptimizerState,
}

struct BlobWriter {
    records: Vec<RecordMeta>,
    blob: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f32]) {
        self.records.push(RecordMeta {
            name,
            shape,
            offset: self.blob.len() as u64,
            count: values.len() as u64,
        });
        for v in values {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn push_encoder(&mut self, prefix: &str, enc: &Encoder<f32>) {
        for p in enc.params() {
            self.push(
                format!("{prefix}/{}", p.name),
                p.value.dims().to_vec(),
                p.value.values(),
            );
        }
        for (i, s) in enc.bn_states().iter().enumerate() {
            let c = s.running_mean.len();
            self.push(format!("{prefix}_bn/{i}/mean"), vec![c], &s.running_mean);
            self.push(format!("{prefix}_bn/{i}/var"), vec![c], &s.running_var);
        }
    }
}

pub fn save_checkpoint(path: &Path, state: &TrainState<'_>) -> Result<()> {
    let mut w = BlobWriter { records: Vec::new(), blob: Vec::new() };
    w.push_encoder("student", state.student);
    w.push_encoder("teacher", &state.teacher.encoder);
    for (i, buf) in state.opt.buffers.iter().enumerate() {
        w.push(format!("opt/{i}/momentum"), vec![buf.len()], buf);
    }
    let header = CheckpointHeader {
        run_id: state.run_id.to_string(),
        step: state.step,
        opt_steps: state.opt.step_count,
        endianness: "little".to_string(),
        config: state.config.clone(),
        records: w.records,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| StoreError::CorruptCheckpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header_json.len() + w.blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&w.blob);
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

struct BlobReader<'a> {
    header: &'a CheckpointHeader,
    blob: &'a [u8],
}

impl<'a> BlobReader<'a> {
    fn take(&self, name: &str) -> Result<Vec<f32>> {
        let rec = self
            .header
            .records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| StoreError::CorruptCheckpoint(format!("missing record {name}")))?;
        let start = rec.offset as usize;
        let end = start + rec.count as usize * 4;
        if end > self.blob.len() {
            return Err(StoreError::CorruptCheckpoint(format!(
                "record {name} overruns the blob"
            )));
        }
        Ok(self.blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunks")))
            .collect())
    }

    fn fill_encoder(&self, prefix: &str, enc: &mut Encoder<f32>) -> Result<()> {
        for i in 0..enc.params().len() {
            let name = format!("{prefix}/{}", enc.params()[i].name);
            let values = self.take(&name)?;
            if values.len() != enc.params()[i].value.numel() {
                return Err(StoreError::CorruptCheckpoint(format!(
                    "record {name} holds {} values, expected {}",
                    values.len(),
                    enc.params()[i].value.numel()
                )));
            }
            enc.set_param_values(i, values);
        }
        for i in 0..enc.bn_states().len() {
            let mean = self.take(&format!("{prefix}_bn/{i}/mean"))?;
            let var = self.take(&format!("{prefix}_bn/{i}/var"))?;
            let state = &mut enc.bn_states_mut()[i];
            if mean.len() != state.running_mean.len() || var.len() != state.running_var.len() {
                return Err(StoreError::CorruptCheckpoint(format!(
                    "BN state {i} channel mismatch"
                )));
            }
            state.running_mean = mean;
            state.running_var = var;
        }
        Ok(())
    }
}

/// Loaded checkpoint, reassembled into live training state.
pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub student: Encoder<f32>,
    pub teacher: TeacherState<f32>,
    pub opt: OptimizerState,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(StoreError::CorruptCheckpoint("bad magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + header_len {
        return Err(StoreError::CorruptCheckpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| StoreError::CorruptCheckpoint(e.to_string()))?;
    if header.endianness != "little" {
        return Err(StoreError::CorruptCheckpoint(format!(
            "unsupported endianness tag {}",
            header.endianness
        )));
    }
    let blob = &bytes[12 + header_len..];
    // Header/blob length consistency: records must tile the blob exactly.
    let total: u64 = header.records.iter().map(|r| r.count * 4).sum();
    if total != blob.len() as u64 {
        return Err(StoreError::CorruptCheckpoint(format!(
            "blob holds {} bytes but records describe {total}",
            blob.len()
        )));
    }
    let reader = BlobReader { header: &header, blob };

    let mut student = build_encoder::<f32>(&header.config.encoder, header.config.train.seed)
        .map_err(|e| StoreError::CorruptCheckpoint(e.to_string()))?;
    reader.fill_encoder("student", &mut student)?;
    let mut teacher =
        init_teacher(&student).map_err(|e| StoreError::CorruptCheckpoint(e.to_string()))?;
    reader.fill_encoder("teacher", &mut teacher.encoder)?;
    teacher.step_of_last_update = header.step;

    let mut opt = OptimizerState::new(&student);
    for (i, buf) in opt.buffers.iter_mut().enumerate() {
        let values = reader.take(&format!("opt/{i}/momentum"))?;
        if values.len() != buf.len() {
            return Err(StoreError::CorruptCheckpoint(format!(
                "optimizer buffer {i} length mismatch"
            )));
        }
        *buf = values;
    }
    opt.step_count = header.opt_steps;

    Ok(LoadedCheckpoint {
        header,
        student,
        teacher,
        opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, AugmentParams};
    use crate::nn::{BackboneKind, EncoderSpec};
    use crate::train::Pretrainer;

    fn desk_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.encoder = EncoderSpec {
            backbone: BackboneKind::Mlp,
            backbone_widths: vec![6],
            in_channels: 3,
            in_size: 8,
            projector_hidden: 6,
            projector_out: 4,
            predictor_hidden: 6,
            use_predictor: true,
        };
        cfg.augment1 = AugmentParams::view1(8);
        cfg.augment2 = AugmentParams::view2(8);
        cfg.dataset.synth.per_class = 8;
        cfg.dataset.synth.image_size = 8;
        cfg.train.batch_size = 4;
        cfg.train.epochs = 2;
        cfg.train.warmup_epochs = 1;
        cfg
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_and_save_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config();
        let ds = synth_blobs(&cfg.dataset.synth).unwrap();
        let mut tr = Pretrainer::new(
            cfg.train.clone(),
            &cfg.encoder,
            cfg.augment1,
            cfg.augment2,
            &ds,
        )
        .unwrap();
        tr.run_epoch(&ds, |_| {}).unwrap();

        let path = dir.path().join("ckpt.bin");
        let state = TrainState {
            run_id: "deadbeef",
            step: tr.step,
            config: &cfg,
            student: &tr.student,
            teacher: &tr.teacher,
            opt: &tr.opt,
        };
        save_checkpoint(&path, &state).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.header.step, tr.step);
        assert_eq!(loaded.student.checksum(), tr.student.checksum());
        assert_eq!(
            loaded.teacher.encoder.checksum(),
            tr.teacher.encoder.checksum()
        );
        assert_eq!(loaded.opt.buffers, tr.opt.buffers);
        assert_eq!(loaded.opt.step_count, tr.opt.step_count);

        // save -> load -> save produces identical bytes.
        let path2 = dir.path().join("ckpt2.bin");
        let state2 = TrainState {
            run_id: "deadbeef",
            step: loaded.header.step,
            config: &loaded.header.config,
            student: &loaded.student,
            teacher: &loaded.teacher,
            opt: &loaded.opt,
        };
        save_checkpoint(&path2, &state2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config();
        let ds = synth_blobs(&cfg.dataset.synth).unwrap();
        let tr = Pretrainer::new(
            cfg.train.clone(),
            &cfg.encoder,
            cfg.augment1,
            cfg.augment2,
            &ds,
        )
        .unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(
            &path,
            &TrainState {
                run_id: "x",
                step: 0,
                config: &cfg,
                student: &tr.student,
                teacher: &tr.teacher,
                opt: &tr.opt,
            },
        )
        .unwrap();

        // Truncated blob: header/blob length mismatch.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(StoreError::CorruptCheckpoint(_))
        ));

        // Bad magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(StoreError::CorruptCheckpoint(_))
        ));
    }
}
