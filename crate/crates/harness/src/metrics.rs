//! Metrics log: one JSON object per line, tagged by `kind`.
//!
//! The first line is a header naming the run, its dataset and rng; every
//! later line is a step or epoch record. Numbers are written in shortest
//! round-trip form, so identical runs give identical bytes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetSpec, ExperimentConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RNG_ALGORITHM: &str = "chacha20";

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on metrics file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub run_id: String,
    pub dataset: DatasetSpec,
    pub rng: String,
    pub dtype: String,
    /// Layer id to save policy tag, with `M` for velora layers.
    pub policies: BTreeMap<String, String>,
}

/// Bytes the backward cache held during the step being reported.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StoredBytes {
    pub per_layer: BTreeMap<String, usize>,
    pub activation_bytes: usize,
    pub full_equivalent_bytes: usize,
    pub projection_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub run_id: String,
    pub step: u64,
    pub epoch: u64,
    pub train_loss: f64,
    /// Present on epoch records.
    pub eval_metric: Option<f64>,
    pub stored: StoredBytes,
    /// Wall-clock throughput; always null in deterministic mode.
    pub steps_per_sec: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsLine {
    Header(Header),
    Step(StepRecord),
    /// Written after each epoch's evaluation; `train_loss` is the epoch mean.
    Epoch(StepRecord),
}

impl MetricsLine {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialise")
    }
}

/// Parses one line. Rejects non-finite losses and unknown fields.
pub fn parse_metrics_line(line: &str) -> Result<MetricsLine, String> {
    let parsed: MetricsLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if let MetricsLine::Step(r) | MetricsLine::Epoch(r) = &parsed {
        if !r.train_loss.is_finite() || r.eval_metric.is_some_and(|m| !m.is_finite()) {
            return Err("non-finite metric".into());
        }
        if r.steps_per_sec.is_some_and(|s| !(s >= 0.0)) {
            return Err("negative throughput".into());
        }
    }
    Ok(parsed)
}

/// Short hash of the canonical config; equal configs share a run id. The
/// output directory is left out, so a rerun elsewhere keeps its id.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let mut cfg = cfg.clone();
    cfg.out_dir = None;
    let digest = Sha256::digest(cfg.to_canonical().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// A parsed metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: Header,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<StepRecord>,
}

impl RunLog {
    pub fn read(path: &Path) -> Result<Self, MetricsError> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    /// Checks the header comes first, run ids agree, and steps never go back.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, MetricsError> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut epochs: Vec<StepRecord> = Vec::new();
        let mut last_step = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let err = |message: String| MetricsError::Parse { line: i + 1, message };
            if line.trim().is_empty() {
                continue;
            }
            let parsed = parse_metrics_line(&line).map_err(err)?;
            match (parsed, &header) {
                (MetricsLine::Header(h), None) => header = Some(h),
                (MetricsLine::Header(_), Some(_)) => return Err(err("second header".into())),
                (_, None) => return Err(err("record before header".into())),
                (MetricsLine::Step(r) | MetricsLine::Epoch(r), Some(h)) if r.run_id != h.run_id => {
                    return Err(err(format!("run id {} differs from header {}", r.run_id, h.run_id)));
                }
                (MetricsLine::Step(r), Some(_)) => {
                    if last_step.is_some_and(|s| r.step <= s) {
                        return Err(err(format!("step {} does not advance", r.step)));
                    }
                    last_step = Some(r.step);
                    steps.push(r);
                }
                (MetricsLine::Epoch(r), Some(_)) => {
                    if last_step.is_some_and(|s| r.step < s) || epochs.last().is_some_and(|e| r.epoch <= e.epoch) {
                        return Err(err(format!("epoch record {} out of order", r.epoch)));
                    }
                    last_step = Some(r.step);
                    epochs.push(r);
                }
            }
        }
        let header = header.ok_or(MetricsError::Parse {
            line: 0,
            message: "empty metrics file".into(),
        })?;
        Ok(Self { header, steps, epochs })
    }
}

/// Appends lines and flushes each one, so a crash loses at most one record.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, line: &MetricsLine) -> std::io::Result<()> {
        writeln!(self.out, "{}", line.to_line())?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
