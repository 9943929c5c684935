//! Bundled experiment presets and the ablation sweeps built from them.

use velora_core::compression::InitStrategy;

use crate::config::{parse_config, ConfigError, ExperimentConfig, LayerSpec};

/// `(name, TOML text)` of every bundled preset.
pub const PRESETS: [(&str, &str); 5] = [
    ("regression_full", include_str!("../presets/regression_full.toml")),
    ("regression_velora", include_str!("../presets/regression_velora.toml")),
    ("char_lm_full", include_str!("../presets/char_lm_full.toml")),
    ("char_lm_velora", include_str!("../presets/char_lm_velora.toml")),
    ("classification_full", include_str!("../presets/classification_full.toml")),
];

/// Transformer layer subsets compared in the placement sweep. The empty set
/// is the full-backprop baseline.
pub const PLACEMENTS: [&[&str]; 9] = [
    &[],
    &["query"],
    &["key"],
    &["value"],
    &["down"],
    &["query", "value"],
    &["value", "down"],
    &["query", "value", "down"],
    &["query", "key", "value", "down"],
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PresetError {
    #[error("no preset named {0}")]
    Unknown(String),
    #[error("preset {name}: {source}")]
    Invalid {
        name: String,
        #[source]
        source: ConfigError,
    },
}

pub fn preset(name: &str) -> Result<ExperimentConfig, PresetError> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| PresetError::Unknown(name.into()))?;
    parse_config(text).map_err(|source| PresetError::Invalid {
        name: name.into(),
        source,
    })
}

/// Sub-token sizes `D/64, D/32, D/16, D/8`, dropping any below 1.
pub fn m_grid(d: usize) -> Vec<usize> {
    [64, 32, 16, 8].iter().filter(|&&f| d >= f && d % f == 0).map(|f| d / f).collect()
}

fn input_depth(cfg: &ExperimentConfig, layer: &str) -> Result<usize, ConfigError> {
    cfg.layer_slots()
        .into_iter()
        .find(|(n, _)| n == layer)
        .map(|(_, d)| d)
        .ok_or_else(|| ConfigError {
            errors: vec![format!("no layer named {layer}")],
        })
}

fn with_layers(base: &ExperimentConfig, layers: &[(&str, LayerSpec)]) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = base.clone();
    for (name, spec) in layers {
        let mut spec = spec.clone();
        spec.fill_defaults();
        cfg.layers.insert((*name).into(), spec);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One config per `M` in [`m_grid`] for `layer`.
pub fn m_sweep(base: &ExperimentConfig, layer: &str, init: InitStrategy) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let d = input_depth(base, layer)?;
    m_grid(d)
        .into_iter()
        .map(|m| with_layers(base, &[(layer, LayerSpec::velora(m, init))]))
        .collect()
}

/// One config per initialisation strategy for `layer` at size `m`.
pub fn init_sweep(base: &ExperimentConfig, layer: &str, m: usize) -> Result<Vec<ExperimentConfig>, ConfigError> {
    InitStrategy::ALL
        .iter()
        .map(|&init| with_layers(base, &[(layer, LayerSpec::velora(m, init))]))
        .collect()
}

/// One config per row of [`PLACEMENTS`], each compressed layer at `M = D/8`.
pub fn placement_sweep(base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>, ConfigError> {
    PLACEMENTS
        .iter()
        .map(|set| {
            let specs = set
                .iter()
                .map(|&name| Ok((name, LayerSpec::velora(input_depth(base, name)? / 8, InitStrategy::FixedAverage))))
                .collect::<Result<Vec<_>, ConfigError>>()?;
            let mut cfg = base.clone();
            cfg.layers.retain(|n, _| !PLACEMENTS[8].contains(&n.as_str()));
            with_layers(&cfg, &specs)
        })
        .collect()
}
