//! Side-by-side comparison of finished runs.
//!
//! The first run is the baseline: gaps and byte ratios are taken against it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::metrics::RunLog;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompareError {
    #[error("need at least two runs to compare, got {0}")]
    TooFew(usize),
    #[error("run {index} ({run_id}) used a different dataset than the baseline: {detail}")]
    DatasetMismatch { index: usize, run_id: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: u64,
    /// Evaluation metric per run; `None` if a run stopped earlier.
    pub eval: Vec<Option<f64>>,
    /// `eval[i] − eval[0]`.
    pub gap: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerBytesRow {
    pub layer: String,
    /// Activation bytes held for backward during each run's last logged step.
    pub bytes: Vec<Option<usize>>,
    /// `bytes[0] / bytes[i]`, i.e. the compression factor against the
    /// baseline.
    pub ratio: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub policies: BTreeMap<String, String>,
    pub final_eval: Option<f64>,
    pub activation_bytes: Option<usize>,
    pub full_equivalent_bytes: Option<usize>,
    /// `(final_eval[i] − final_eval[0]) / |final_eval[0]|`.
    pub final_relative_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub runs: Vec<RunSummary>,
    pub epochs: Vec<EpochRow>,
    pub layers: Vec<LayerBytesRow>,
}

pub fn compare_runs(logs: &[RunLog]) -> Result<Comparison, CompareError> {
    if logs.len() < 2 {
        return Err(CompareError::TooFew(logs.len()));
    }
    let base = &logs[0].header.dataset;
    for (i, log) in logs.iter().enumerate().skip(1) {
        if &log.header.dataset != base {
            return Err(CompareError::DatasetMismatch {
                index: i,
                run_id: log.header.run_id.clone(),
                detail: format!("{:?} vs {:?}", log.header.dataset, base),
            });
        }
    }

    let epochs: BTreeSet<u64> = logs.iter().flat_map(|l| l.epochs.iter().map(|e| e.epoch)).collect();
    let epoch_rows = epochs
        .into_iter()
        .map(|epoch| {
            let eval: Vec<Option<f64>> = logs
                .iter()
                .map(|l| l.epochs.iter().find(|e| e.epoch == epoch).and_then(|e| e.eval_metric))
                .collect();
            let gap = eval.iter().map(|e| Some(e.as_ref()? - eval[0]?)).collect();
            EpochRow { epoch, eval, gap }
        })
        .collect();

    let last_stored: Vec<_> = logs
        .iter()
        .map(|l| l.epochs.last().or(l.steps.last()).map(|r| &r.stored))
        .collect();
    let layer_names: BTreeSet<&String> = last_stored.iter().flatten().flat_map(|s| s.per_layer.keys()).collect();
    let layers = layer_names
        .into_iter()
        .map(|layer| {
            let bytes: Vec<Option<usize>> = last_stored.iter().map(|s| s.and_then(|s| s.per_layer.get(layer).copied())).collect();
            let ratio = bytes
                .iter()
                .map(|b| match (bytes[0], *b) {
                    (Some(base), Some(b)) if b > 0 => Some(base as f64 / b as f64),
                    _ => None,
                })
                .collect();
            LayerBytesRow {
                layer: layer.clone(),
                bytes,
                ratio,
            }
        })
        .collect();

    let finals: Vec<Option<f64>> = logs.iter().map(|l| l.epochs.last().and_then(|e| e.eval_metric)).collect();
    let runs = logs
        .iter()
        .zip(&last_stored)
        .zip(&finals)
        .map(|((log, stored), fin)| RunSummary {
            run_id: log.header.run_id.clone(),
            policies: log.header.policies.clone(),
            final_eval: *fin,
            activation_bytes: stored.map(|s| s.activation_bytes),
            full_equivalent_bytes: stored.map(|s| s.full_equivalent_bytes),
            final_relative_gap: match (finals[0], *fin) {
                (Some(b), Some(f)) if b != 0.0 => Some((f - b) / b.abs()),
                (Some(b), Some(f)) if b == f => Some(0.0),
                _ => None,
            },
        })
        .collect();

    Ok(Comparison {
        runs,
        epochs: epoch_rows,
        layers,
    })
}

fn cell<T: fmt::Display>(x: &Option<T>) -> String {
    x.as_ref().map_or("-".into(), |v| v.to_string())
}

fn num(x: &Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.6}"))
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<&str> = self.runs.iter().map(|r| r.run_id.as_str()).collect();
        writeln!(f, "epoch | {}", ids.join(" | "))?;
        for row in &self.epochs {
            let cells: Vec<String> = row
                .eval
                .iter()
                .zip(&row.gap)
                .map(|(e, g)| format!("{} ({})", num(e), g.map_or("-".into(), |g| format!("{g:+.6}"))))
                .collect();
            writeln!(f, "{:>5} | {}", row.epoch, cells.join(" | "))?;
        }
        writeln!(f)?;
        writeln!(f, "layer | {}", ids.join(" | "))?;
        for row in &self.layers {
            let cells: Vec<String> = row
                .bytes
                .iter()
                .zip(&row.ratio)
                .map(|(b, r)| format!("{} (x{})", cell(b), r.map_or("-".into(), |r| format!("{r:.2}"))))
                .collect();
            writeln!(f, "{} | {}", row.layer, cells.join(" | "))?;
        }
        writeln!(f)?;
        for r in &self.runs {
            writeln!(
                f,
                "{}: final eval {}, relative gap {}, activation bytes {} of {}",
                r.run_id,
                num(&r.final_eval),
                r.final_relative_gap.map_or("-".into(), |g| format!("{:+.4}%", 100.0 * g)),
                cell(&r.activation_bytes),
                cell(&r.full_equivalent_bytes)
            )?;
        }
        Ok(())
    }
}
