//! Exact accounting of the scalars a forward pass keeps for backward.
//!
//! Counts are derived from shapes, not sampled from an allocator. Tests and
//! the training runner cross-check them against the live
//! [`BackwardCache`](crate::autograd::BackwardCache).

use std::collections::BTreeMap;
use std::fmt;

use crate::compression::check_subtoken_size;
use crate::{DType, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyTag {
    Full,
    Velora,
    None,
    /// The `M` scalars of a layer's projection vector.
    Projection,
}

impl PolicyTag {
    pub fn tag(self) -> &'static str {
        match self {
            PolicyTag::Full => "full",
            PolicyTag::Velora => "velora",
            PolicyTag::None => "none",
            PolicyTag::Projection => "projection",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub layer_id: String,
    pub policy: PolicyTag,
    pub m: usize,
    pub scalars_stored: usize,
    pub bytes_stored: usize,
    /// What the full policy would have stored for the same input.
    pub scalars_full_equivalent: usize,
    pub dtype: DType,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryLedger {
    entries: Vec<LedgerEntry>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends one entry for a layer whose saved input has `shape`.
    ///
    /// `m` is only read for the velora policy, where it must divide the last
    /// axis of `shape`.
    pub fn record(&mut self, layer_id: &str, policy: PolicyTag, shape: &[usize], m: usize, dtype: DType) -> Result<()> {
        let numel: usize = shape.iter().product();
        let (m, stored, full) = match policy {
            PolicyTag::Full => (1, numel, numel),
            PolicyTag::Velora => {
                check_subtoken_size(layer_id, *shape.last().unwrap_or(&0), m)?;
                (m, numel / m, numel)
            }
            // frozen layers need no input for backward under any policy
            PolicyTag::None => (1, 0, 0),
            PolicyTag::Projection => (numel, numel, 0),
        };
        self.entries.push(LedgerEntry {
            layer_id: layer_id.to_string(),
            policy,
            m,
            scalars_stored: stored,
            bytes_stored: stored * dtype.size_bytes(),
            scalars_full_equivalent: full,
            dtype,
        });
        Ok(())
    }

    /// Line item for a projection vector of length `m`.
    pub fn record_projection(&mut self, layer_id: &str, m: usize, dtype: DType) {
        self.record(layer_id, PolicyTag::Projection, &[m], m, dtype)
            .expect("projection entries never fail");
    }

    pub fn report(&self) -> LedgerReport {
        let mut report = LedgerReport::default();
        for e in &self.entries {
            *report.bytes_per_policy.entry(e.policy).or_default() += e.bytes_stored;
            let layer = report.per_layer.entry(e.layer_id.clone()).or_default();
            match e.policy {
                PolicyTag::Projection => {
                    layer.projection_bytes += e.bytes_stored;
                    report.projection_bytes += e.bytes_stored;
                }
                _ => {
                    layer.activation_bytes += e.bytes_stored;
                    layer.full_equivalent_bytes += e.scalars_full_equivalent * e.dtype.size_bytes();
                    report.activation_scalars += e.scalars_stored;
                    report.activation_bytes += e.bytes_stored;
                    report.full_equivalent_scalars += e.scalars_full_equivalent;
                    report.full_equivalent_bytes += e.scalars_full_equivalent * e.dtype.size_bytes();
                }
            }
        }
        report.total_bytes = report.activation_bytes + report.projection_bytes;
        report
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerTotals {
    pub activation_bytes: usize,
    pub full_equivalent_bytes: usize,
    pub projection_bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LedgerReport {
    pub bytes_per_policy: BTreeMap<PolicyTag, usize>,
    pub per_layer: BTreeMap<String, LayerTotals>,
    pub activation_scalars: usize,
    pub activation_bytes: usize,
    pub full_equivalent_scalars: usize,
    pub full_equivalent_bytes: usize,
    pub projection_bytes: usize,
    pub total_bytes: usize,
}

impl LedgerReport {
    /// Full-policy activation scalars over stored activation scalars.
    /// `None` when nothing is stored.
    pub fn compression_ratio(&self) -> Option<f64> {
        (self.activation_scalars > 0)
            .then(|| self.full_equivalent_scalars as f64 / self.activation_scalars as f64)
    }
}

impl fmt::Display for LedgerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>14} {:>14} {:>12} {:>8}", "layer", "stored B", "full B", "proj B", "ratio")?;
        for (id, t) in &self.per_layer {
            let ratio = if t.activation_bytes > 0 {
                format!("{:.2}", t.full_equivalent_bytes as f64 / t.activation_bytes as f64)
            } else {
                "-".into()
            };
            writeln!(
                f,
                "{:<24} {:>14} {:>14} {:>12} {:>8}",
                id, t.activation_bytes, t.full_equivalent_bytes, t.projection_bytes, ratio
            )?;
        }
        let ratio = self.compression_ratio().map_or("-".into(), |r| format!("{r:.2}"));
        write!(
            f,
            "{:<24} {:>14} {:>14} {:>12} {:>8}",
            "total", self.activation_bytes, self.full_equivalent_bytes, self.projection_bytes, ratio
        )
    }
}
