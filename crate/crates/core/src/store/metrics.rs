//! Append-only metrics stream (JSONL) and the gap-report CSV derived from it.
//!
//! One header line opens a run segment; every training step appends exactly
//! one `step` record with a strictly increasing step field; epoch summaries
//! interleave without affecting the step sequence.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::train::GapRecord;

use super::{io_err, Result, StoreError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_inter_loss: f64,
    pub mean_intra_loss: f64,
    pub mean_intra_gap: f64,
}

impl EpochSummary {
    pub fn from_records(epoch: usize, records: &[GapRecord]) -> Self {
        let n = records.len().max(1) as f64;
        EpochSummary {
            epoch,
            steps: records.len(),
            mean_inter_loss: records.iter().map(|r| r.inter_loss as f64).sum::<f64>() / n,
            mean_intra_loss: records.iter().map(|r| r.intra_loss as f64).sum::<f64>() / n,
            mean_intra_gap: records.iter().map(|r| r.intra_gap as f64).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsLine {
    Header { run_id: String, code_version: String },
    Step(GapRecord),
    Epoch(EpochSummary),
}

/// Appends metrics lines; refuses step records whose step does not strictly
/// increase within this writer's segment.
pub struct MetricsWriter {
    file: File,
    path: std::path::PathBuf,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path, run_id: &str) -> Result<Self> {
        let mut w = MetricsWriter {
            file: File::create(path).map_err(|e| io_err(path, e))?,
            path: path.to_path_buf(),
            last_step: None,
        };
        w.write_line(&MetricsLine::Header {
            run_id: run_id.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        })?;
        Ok(w)
    }

    /// Reopens an existing stream for appending (checkpoint resume); a new
    /// header line marks the segment boundary.
    pub fn append(path: &Path, run_id: &str) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        let mut w = MetricsWriter {
            file,
            path: path.to_path_buf(),
            last_step: None,
        };
        w.write_line(&MetricsLine::Header {
            run_id: run_id.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        })?;
        Ok(w)
    }

    fn write_line(&mut self, line: &MetricsLine) -> Result<()> {
        let mut text =
            serde_json::to_string(line).map_err(|e| io_err(&self.path, e))?;
        text.push('\n');
        self.file
            .write_all(text.as_bytes())
            .map_err(|e| io_err(&self.path, e))
    }

    pub fn step(&mut self, record: &GapRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if record.step <= last {
                return Err(StoreError::MalformedMetrics {
                    line: 0,
                    message: format!("step {} does not increase past {last}", record.step),
                });
            }
        }
        self.last_step = Some(record.step);
        self.write_line(&MetricsLine::Step(record.clone()))
    }

    pub fn epoch(&mut self, summary: &EpochSummary) -> Result<()> {
        self.write_line(&MetricsLine::Epoch(summary.clone()))
    }
}

/// Parses a metrics stream; reports the 1-based line number on malformed
/// input.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: MetricsLine =
            serde_json::from_str(&line).map_err(|e| StoreError::MalformedMetrics {
                line: i + 1,
                message: e.to_string(),
            })?;
        lines.push(parsed);
    }
    Ok(lines)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub rows: usize,
    /// Mean intra gap over the final 25% of steps.
    pub final_quarter_mean_gap: f64,
    pub final_quarter_mean_sim_pct: f64,
}

/// Renders step records as CSV plus the tail summary used for
/// baseline-vs-residual comparisons. Errors on a stream without steps.
pub fn gap_report_csv(lines: &[MetricsLine]) -> Result<(String, GapSummary)> {
    let steps: Vec<&GapRecord> = lines
        .iter()
        .filter_map(|l| match l {
            MetricsLine::Step(r) => Some(r),
            _ => None,
        })
        .collect();
    if steps.is_empty() {
        return Err(StoreError::EmptyMetrics);
    }
    let mut csv = String::from("step,intra_gap,sim_pct,inter_loss,intra_loss,beta,lr\n");
    for r in &steps {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.intra_gap, r.sim_pct, r.inter_loss, r.intra_loss, r.beta, r.lr
        ));
    }
    let tail = steps.len().div_ceil(4);
    let tail_slice = &steps[steps.len() - tail..];
    let summary = GapSummary {
        rows: steps.len(),
        final_quarter_mean_gap: tail_slice.iter().map(|r| r.intra_gap as f64).sum::<f64>()
            / tail as f64,
        final_quarter_mean_sim_pct: tail_slice.iter().map(|r| r.sim_pct as f64).sum::<f64>()
            / tail as f64,
    };
    Ok((csv, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64, gap: f32) -> GapRecord {
        GapRecord {
            step,
            intra_gap: gap,
            sim_pct: (1.0 - gap / 2.0) * 100.0,
            inter_loss: 1.5,
            intra_loss: gap,
            beta: 0.996,
            lr: 0.1,
        }
    }

    #[test]
    fn stream_roundtrip_and_strict_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path, "run01").unwrap();
        w.step(&record(0, 0.5)).unwrap();
        w.step(&record(1, 0.4)).unwrap();
        assert!(w.step(&record(1, 0.4)).is_err(), "steps must increase");
        w.epoch(&EpochSummary::from_records(0, &[record(0, 0.5), record(1, 0.4)]))
            .unwrap();
        drop(w);

        let lines = read_metrics(&path).unwrap();
        assert_eq!(lines.len(), 4);
        assert!(matches!(lines[0], MetricsLine::Header { .. }));
        match &lines[3] {
            MetricsLine::Epoch(e) => {
                assert_eq!(e.steps, 2);
                assert!((e.mean_intra_gap - 0.45).abs() < 1e-6);
            }
            other => panic!("expected epoch line, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            "{\"kind\":\"header\",\"run_id\":\"x\",\"code_version\":\"0\"}\nnot json\n",
        )
        .unwrap();
        match read_metrics(&path) {
            Err(StoreError::MalformedMetrics { line: 2, .. }) => {}
            other => panic!("expected malformed at line 2, got {other:?}"),
        }
    }

    #[test]
    fn csv_rows_match_records_and_tail_mean_is_exact() {
        let lines: Vec<MetricsLine> = (0..8)
            .map(|i| MetricsLine::Step(record(i, 0.1 * i as f32)))
            .collect();
        let (csv, summary) = gap_report_csv(&lines).unwrap();
        assert_eq!(csv.lines().count(), 9, "header plus one row per record");
        assert_eq!(summary.rows, 8);
        // Final quarter of 8 steps = last 2 records (gaps 0.6, 0.7).
        let expect = (0.6f32 as f64 + 0.7f32 as f64) / 2.0;
        assert!((summary.final_quarter_mean_gap - expect).abs() < 1e-9);

        assert!(matches!(
            gap_report_csv(&[]),
            Err(StoreError::EmptyMetrics)
        ));
    }
}
