//! Builds the model a config describes and moves its state in and out of
//! checkpoints.

use std::collections::BTreeMap;

use velora_core::autograd::{
    CharTransformer, DenseLayer, LoraDenseLayer, Network, Optimizer, SavePolicy, Sequential, StackLayer,
};
use velora_core::rng::RngState;
use velora_core::{Error, Result, Tensor};

use crate::checkpoint::{Checkpoint, ParamRecord};
use crate::config::{ExperimentConfig, ModelKind};
use crate::dataset::Dataset;

/// Keeps model initialisation independent of the data streams drawn from
/// the same experiment seed.
const MODEL_SEED_SALT: u64 = 0x6d6f_6465_6c00_0001;

pub fn model_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed ^ MODEL_SEED_SALT
}

pub fn build_network(cfg: &ExperimentConfig, data: &Dataset) -> Result<Network> {
    let dtype = cfg.dtype();
    let seed = model_seed(cfg);
    match cfg.model.kind {
        ModelKind::Mlp => {
            let hidden = cfg.model.hidden.clone().unwrap_or_default();
            let widths: Vec<usize> = std::iter::once(data.input_width())
                .chain(hidden)
                .chain(std::iter::once(data.output_width()))
                .collect();
            let layers = widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    let name = format!("layer{i}");
                    let policy = cfg.layer(&name).policy();
                    let s = seed.wrapping_add(7919 * i as u64);
                    Ok(match &cfg.model.lora {
                        None => StackLayer::Dense(DenseLayer::new(name, w[0], w[1], true, policy, dtype, s)?),
                        Some(l) => StackLayer::Lora(LoraDenseLayer::new(
                            name,
                            w[0],
                            w[1],
                            l.rank,
                            l.alpha,
                            policy,
                            SavePolicy::Full,
                            dtype,
                            s,
                        )?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Network::Sequential(Sequential::new(layers)?))
        }
        ModelKind::Transformer => {
            let m = &cfg.model;
            let t = CharTransformer::new(
                data.output_width(),
                cfg.dataset.context.unwrap_or(64),
                m.d_model.unwrap_or(32),
                m.d_ff.unwrap_or(128),
                m.blocks.unwrap_or(2),
                cfg.transformer_policies(),
                dtype,
                seed,
            )?;
            Ok(Network::Transformer(t))
        }
    }
}

/// Human-readable policy per dense layer, e.g. `velora(M=8)`.
pub fn policy_tags(net: &Network) -> BTreeMap<String, String> {
    net.dense_layers()
        .into_iter()
        .map(|l| {
            let tag = match l.policy() {
                SavePolicy::Velora(c) => format!("velora(M={},init={})", c.m, c.init.tag()),
                p => p.tag().tag().to_string(),
            };
            (l.id().to_string(), tag)
        })
        .collect()
}

/// The stored config omits the output directory, so a checkpoint does not
/// depend on where it was written.
pub fn snapshot(
    cfg: &ExperimentConfig,
    net: &Network,
    opt: &Optimizer,
    step: u64,
    epoch: u64,
    rng: RngState,
) -> Checkpoint {
    let mut portable = cfg.clone();
    portable.out_dir = None;
    Checkpoint {
        config: portable.to_canonical(),
        step,
        epoch,
        rng,
        optimizer: opt.kind(),
        optimizer_step: opt.step_count(),
        moments: opt.moments().clone(),
        params: net
            .params()
            .into_iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                dtype: p.dtype(),
                frozen: p.frozen,
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect(),
        projections: net.dense_layers().into_iter().filter_map(|l| l.projection().cloned()).collect(),
    }
}

/// Rebuilds the network and optimizer a checkpoint was taken from.
pub fn restore(cfg: &ExperimentConfig, data: &Dataset, ck: &Checkpoint) -> Result<(Network, Optimizer)> {
    let mut net = build_network(cfg, data)?;
    let mut params = net.params_mut();
    if params.len() != ck.params.len() {
        return Err(Error::State(format!(
            "checkpoint holds {} parameters, the model has {}",
            ck.params.len(),
            params.len()
        )));
    }
    for rec in &ck.params {
        let p = params
            .iter_mut()
            .find(|p| p.name == rec.name)
            .ok_or_else(|| Error::State(format!("checkpoint parameter {} is not in the model", rec.name)))?;
        if p.value.shape() != rec.shape.as_slice() || p.dtype() != rec.dtype || p.frozen != rec.frozen {
            return Err(Error::State(format!("checkpoint parameter {} does not match the model", rec.name)));
        }
        p.value = Tensor::with_dtype(rec.shape.clone(), rec.data.clone(), rec.dtype)?;
    }
    for pv in &ck.projections {
        let mut layers = net.dense_layers_mut();
        let layer = layers
            .iter_mut()
            .find(|l| l.id() == pv.layer_id())
            .ok_or_else(|| Error::State(format!("projection for unknown layer {}", pv.layer_id())))?;
        layer.set_projection(pv.clone())?;
    }
    let opt = Optimizer::with_state(ck.optimizer, ck.optimizer_step, ck.moments.clone());
    Ok((net, opt))
}
