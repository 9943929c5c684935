//! Diagnostics over a trained checkpoint: sub-token stable-rank profiles,
//! divergence probability curves and gradient sparsity. Every result is a
//! flat row so any plotting tool can read it.

use serde::{Deserialize, Serialize};
use velora_core::analysis::{
    divergence_probability_analytic, divergence_probability_montecarlo_with, gradient_sparsity,
    subtoken_stable_rank_profile, DivergenceModel,
};
use velora_core::autograd::BackwardCache;
use velora_core::compression::{compress_tokens, reconstruct_tokens};
use velora_core::rng::SeededRng;
use velora_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::network::restore;
use crate::train::{forward, loss, TrainError};

pub const ANALYSIS_FILE: &str = "analysis.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalysisRow {
    StableRank {
        layer: String,
        d: usize,
        m: usize,
        rows: usize,
        stable_rank: f64,
        normalized: f64,
    },
    /// A requested `M` that does not divide the layer's depth.
    Skipped { layer: String, d: usize, m: usize, reason: String },
    Divergence {
        sigma: f64,
        k: f64,
        analytic: f64,
        montecarlo: f64,
        /// `exact` or `first_order`; see [`DivergenceModel`].
        model: String,
        samples: usize,
        /// Three binomial standard errors, `3/√n`.
        tolerance: f64,
    },
    /// Relative reconstruction error of a velora layer's probe input
    /// under its current projection vector.
    Projection {
        layer: String,
        m: usize,
        v: Vec<f64>,
        relative_error: f64,
    },
    Sparsity {
        param: String,
        entries: usize,
        fraction_zero: f64,
    },
}

impl AnalysisRow {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("rows serialise")
    }
}

/// Deterministic seed for the Monte-Carlo row at grid position `i`.
fn mc_seed(base: u64, i: usize) -> u64 {
    SeededRng::new(base, 0xd1f + i as u64).next_u64()
}

/// Analytic and both Monte-Carlo curves over the configured grid.
pub fn divergence_rows(cfg: &ExperimentConfig) -> velora_core::Result<Vec<AnalysisRow>> {
    let a = &cfg.analysis;
    let mut rows = Vec::new();
    let mut i = 0;
    for &sigma in &a.sigmas {
        for &f in &a.k_factors {
            let k = f * sigma * sigma;
            let analytic = divergence_probability_analytic(k, sigma)?;
            for model in [DivergenceModel::Exact, DivergenceModel::FirstOrder] {
                let montecarlo = divergence_probability_montecarlo_with(k, sigma, a.mc_samples, mc_seed(cfg.seed, i), model)?;
                i += 1;
                rows.push(AnalysisRow::Divergence {
                    sigma,
                    k,
                    analytic,
                    montecarlo,
                    model: model.tag().into(),
                    samples: a.mc_samples,
                    tolerance: 3.0 / (a.mc_samples as f64).sqrt(),
                });
            }
        }
    }
    Ok(rows)
}

/// Stable-rank profile of one layer input `[.., D]` over the configured Ms.
pub fn stable_rank_rows(layer: &str, x: &Tensor, ms: &[usize]) -> velora_core::Result<Vec<AnalysisRow>> {
    let d = x.last_dim();
    let tokens = x.numel() / d;
    let z = x.clone().reshape(vec![1, tokens, d])?;
    let mut rows = Vec::new();
    for &m in ms {
        if m == 0 || d % m != 0 {
            rows.push(AnalysisRow::Skipped {
                layer: layer.into(),
                d,
                m,
                reason: format!("M={m} does not divide D={d}"),
            });
            continue;
        }
        if z.frobenius_norm() == 0.0 {
            rows.push(AnalysisRow::Skipped {
                layer: layer.into(),
                d,
                m,
                reason: "input is identically zero".into(),
            });
            continue;
        }
        for p in subtoken_stable_rank_profile(&z, &[m])? {
            rows.push(AnalysisRow::StableRank {
                layer: layer.into(),
                d,
                m: p.m,
                rows: p.rows,
                stable_rank: p.stable_rank,
                normalized: p.normalized,
            });
        }
    }
    Ok(rows)
}

/// Runs every diagnostic on the checkpointed model.
pub fn run_analysis(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Vec<AnalysisRow>, TrainError> {
    let data = Dataset::generate(&cfg.dataset, cfg.dtype())?;
    let (mut net, _) = restore(cfg, &data, ck)?;
    let probe = data.eval_probe(cfg.analysis.probe_examples)?;

    let mut cache = BackwardCache::capturing();
    let out = forward(&mut net, &probe, Some(&mut cache))?;
    let (_, grad) = loss(&out, &probe)?;
    net.zero_grad();
    net.backward(&grad, &cache)?;

    let mut rows = Vec::new();
    for (layer, x) in cache.captured_inputs() {
        rows.extend(stable_rank_rows(layer, x, &cfg.analysis.ms)?);
    }
    for layer in net.dense_layers() {
        if let Some(pv) = layer.projection() {
            let x = cache
                .captured_inputs()
                .find(|(id, _)| *id == layer.id())
                .map(|(_, x)| x)
                .expect("every dense layer input is captured");
            let recon = reconstruct_tokens(&compress_tokens(x, pv)?, pv)?.reshape(x.shape().to_vec())?;
            let err = x.sub(&recon)?.frobenius_norm() / x.frobenius_norm().max(f64::MIN_POSITIVE);
            rows.push(AnalysisRow::Projection {
                layer: layer.id().into(),
                m: pv.m(),
                v: pv.v().to_vec(),
                relative_error: err,
            });
        }
    }
    rows.extend(divergence_rows(cfg)?);
    for p in net.params() {
        if let Some(g) = &p.grad {
            rows.push(AnalysisRow::Sparsity {
                param: p.name.clone(),
                entries: g.numel(),
                fraction_zero: gradient_sparsity(g, cfg.analysis.sparsity_tol)?,
            });
        }
    }
    Ok(rows)
}
