//! Experiment configuration.
//!
//! A config is a TOML document. Unknown keys are rejected, every validation
//! problem is reported at once, and [`ExperimentConfig::to_canonical`] emits
//! a fully defaulted form that parses back to an equal value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use velora_core::autograd::{AttentionPolicies, OptimizerKind, SavePolicy, TransformerPolicies, VeloraConfig};
use velora_core::compression::{InitStrategy, DEFAULT_MOMENTUM};
use velora_core::DType;

/// Everything that went wrong while loading a config.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigError {
    pub errors: Vec<String>,
}

impl ConfigError {
    fn one(msg: impl Into<String>) -> Self {
        Self { errors: vec![msg.into()] }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.errors.as_slice() {
            [one] => write!(f, "invalid config: {one}"),
            many => {
                writeln!(f, "invalid config ({} problems):", many.len())?;
                for e in many {
                    writeln!(f, "  - {e}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DTypeName {
    F32,
    #[default]
    F64,
}

impl From<DTypeName> for DType {
    fn from(d: DTypeName) -> Self {
        match d {
            DTypeName::F32 => DType::F32,
            DTypeName::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default = "default_optimizer")]
    pub kind: OptimizerName,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_optimizer() -> OptimizerName {
    OptimizerName::Adamw
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: default_optimizer(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

impl OptimizerSpec {
    pub fn kind(&self) -> OptimizerKind {
        match self.kind {
            OptimizerName::Sgd => OptimizerKind::Sgd { lr: self.lr },
            OptimizerName::Adamw => OptimizerKind::AdamW {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SyntheticRegression,
    SyntheticClassification,
    CharLm,
}

impl DatasetKind {
    pub fn tag(self) -> &'static str {
        match self {
            DatasetKind::SyntheticRegression => "synthetic_regression",
            DatasetKind::SyntheticClassification => "synthetic_classification",
            DatasetKind::CharLm => "char_lm",
        }
    }
}

/// Corpus value selecting the text bundled with the crate.
pub const BUILTIN_CORPUS: &str = "builtin:alice";

/// Which data to generate or load. Fields not used by `kind` must be left
/// out; the canonical form fills the used ones with their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_out: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<usize>,
    /// Truncates the corpus to this many bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_bytes: Option<usize>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind) -> Self {
        Self {
            kind,
            n: None,
            d_in: None,
            d_out: None,
            noise: None,
            classes: None,
            corpus: None,
            context: None,
            max_bytes: None,
            train_fraction: default_train_fraction(),
            seed: None,
        }
    }

    /// Input width seen by the first layer, for vector datasets.
    pub fn input_dim(&self) -> Option<usize> {
        match self.kind {
            DatasetKind::SyntheticRegression | DatasetKind::SyntheticClassification => self.d_in,
            DatasetKind::CharLm => None,
        }
    }

    /// Output width of the last layer, for vector datasets.
    pub fn output_dim(&self) -> Option<usize> {
        match self.kind {
            DatasetKind::SyntheticRegression => self.d_out,
            DatasetKind::SyntheticClassification => self.classes,
            DatasetKind::CharLm => None,
        }
    }

    fn fill_defaults(&mut self, seed: u64) {
        self.seed.get_or_insert(seed);
        match self.kind {
            DatasetKind::SyntheticRegression => {
                self.n.get_or_insert(2048);
                self.d_in.get_or_insert(64);
                self.d_out.get_or_insert(1);
                self.noise.get_or_insert(0.1);
            }
            DatasetKind::SyntheticClassification => {
                self.n.get_or_insert(2048);
                self.d_in.get_or_insert(32);
                self.classes.get_or_insert(4);
                self.noise.get_or_insert(1.0);
            }
            DatasetKind::CharLm => {
                self.corpus.get_or_insert_with(|| BUILTIN_CORPUS.to_string());
                self.context.get_or_insert(64);
            }
        }
    }

    fn validate(&self, errors: &mut Vec<String>) {
        let kind = self.kind.tag();
        let mut unused = |name: &str, present: bool| {
            if present {
                errors.push(format!("dataset.{name} is not used by {kind}"));
            }
        };
        match self.kind {
            DatasetKind::SyntheticRegression => {
                unused("classes", self.classes.is_some());
                unused("corpus", self.corpus.is_some());
                unused("context", self.context.is_some());
                unused("max_bytes", self.max_bytes.is_some());
            }
            DatasetKind::SyntheticClassification => {
                unused("d_out", self.d_out.is_some());
                unused("corpus", self.corpus.is_some());
                unused("context", self.context.is_some());
                unused("max_bytes", self.max_bytes.is_some());
            }
            DatasetKind::CharLm => {
                unused("n", self.n.is_some());
                unused("d_in", self.d_in.is_some());
                unused("d_out", self.d_out.is_some());
                unused("noise", self.noise.is_some());
                unused("classes", self.classes.is_some());
            }
        }
        for (name, v) in [
            ("n", self.n),
            ("d_in", self.d_in),
            ("d_out", self.d_out),
            ("context", self.context),
            ("max_bytes", self.max_bytes),
        ] {
            if v == Some(0) {
                errors.push(format!("dataset.{name} must be at least 1"));
            }
        }
        if let Some(c) = self.classes {
            if c < 2 {
                errors.push("dataset.classes must be at least 2".into());
            }
        }
        if let Some(noise) = self.noise {
            if !(noise >= 0.0 && noise.is_finite()) {
                errors.push(format!("dataset.noise must be finite and >= 0 (got {noise})"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            errors.push(format!("dataset.train_fraction must lie in (0, 1) (got {})", self.train_fraction));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Hidden widths of an MLP; layers are named `layer0`, `layer1`, ...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    /// Turns every MLP layer into a frozen base plus a low-rank adapter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            hidden: None,
            d_model: None,
            d_ff: None,
            blocks: None,
            lora: None,
        }
    }

    fn fill_defaults(&mut self) {
        match self.kind {
            ModelKind::Mlp => {
                self.hidden.get_or_insert_with(|| vec![64]);
            }
            ModelKind::Transformer => {
                self.d_model.get_or_insert(32);
                self.d_ff.get_or_insert(128);
                self.blocks.get_or_insert(2);
            }
        }
    }
}

/// Transformer layer roles that accept a `[layers.<role>]` section.
pub const TRANSFORMER_ROLES: [&str; 7] = ["query", "key", "value", "output", "up", "down", "head"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    #[default]
    Full,
    Velora,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    Random,
    Svd,
    FixedAverage,
    RunningAverage,
}

impl From<InitName> for InitStrategy {
    fn from(i: InitName) -> Self {
        match i {
            InitName::Random => InitStrategy::Random,
            InitName::Svd => InitStrategy::Svd,
            InitName::FixedAverage => InitStrategy::FixedAverage,
            InitName::RunningAverage => InitStrategy::RunningAverage,
        }
    }
}

impl From<InitStrategy> for InitName {
    fn from(i: InitStrategy) -> Self {
        match i {
            InitStrategy::Random => InitName::Random,
            InitStrategy::Svd => InitName::Svd,
            InitStrategy::FixedAverage => InitName::FixedAverage,
            InitStrategy::RunningAverage => InitName::RunningAverage,
        }
    }
}

/// Save policy for one layer (MLP) or one role (transformer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    #[serde(default)]
    pub save_policy: PolicyName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svd_iters: Option<usize>,
}

impl LayerSpec {
    pub fn velora(m: usize, init: InitStrategy) -> Self {
        Self {
            save_policy: PolicyName::Velora,
            m: Some(m),
            init: Some(init.into()),
            momentum: None,
            svd_iters: None,
        }
    }

    pub(crate) fn fill_defaults(&mut self) {
        if self.save_policy == PolicyName::Velora {
            self.init.get_or_insert(InitName::FixedAverage);
            self.svd_iters.get_or_insert(100);
            if self.init == Some(InitName::RunningAverage) {
                self.momentum.get_or_insert(DEFAULT_MOMENTUM);
            }
        }
    }

    pub fn policy(&self) -> SavePolicy {
        match self.save_policy {
            PolicyName::Full => SavePolicy::Full,
            PolicyName::None => SavePolicy::None,
            PolicyName::Velora => {
                let init = self.init.unwrap_or(InitName::FixedAverage).into();
                let mut cfg = VeloraConfig::new(self.m.unwrap_or(1), init);
                if let Some(mom) = self.momentum {
                    cfg.momentum = mom;
                }
                if let Some(it) = self.svd_iters {
                    cfg.svd_iters = it;
                }
                SavePolicy::Velora(cfg)
            }
        }
    }

    fn validate(&self, name: &str, d_in: usize, errors: &mut Vec<String>) {
        match self.save_policy {
            PolicyName::Velora => match self.m {
                None => errors.push(format!("layer {name}: velora policy needs m")),
                Some(m) if m == 0 || d_in % m != 0 => errors.push(format!(
                    "layer {name}: sub-token size M={m} does not divide its input depth D={d_in}"
                )),
                Some(_) => {}
            },
            _ => {
                for (key, present) in [
                    ("m", self.m.is_some()),
                    ("init", self.init.is_some()),
                    ("momentum", self.momentum.is_some()),
                    ("svd_iters", self.svd_iters.is_some()),
                ] {
                    if present {
                        errors.push(format!("layer {name}: {key} only applies to the velora policy"));
                    }
                }
            }
        }
        if let Some(mom) = self.momentum {
            if !(mom > 0.0 && mom < 1.0) {
                errors.push(format!("layer {name}: momentum must lie in (0, 1) (got {mom})"));
            } else if self.init != Some(InitName::RunningAverage) {
                errors.push(format!("layer {name}: momentum only applies to running_average init"));
            }
        }
        if self.svd_iters == Some(0) {
            errors.push(format!("layer {name}: svd_iters must be at least 1"));
        }
    }
}

/// Diagnostics run by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default = "default_ms")]
    pub ms: Vec<usize>,
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<f64>,
    /// Thresholds as multiples of σ².
    #[serde(default = "default_k_factors")]
    pub k_factors: Vec<f64>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_sparsity_tol")]
    pub sparsity_tol: f64,
    /// Examples drawn from the evaluation split for activation statistics.
    #[serde(default = "default_probe_examples")]
    pub probe_examples: usize,
}

fn default_ms() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32, 64]
}
fn default_sigmas() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}
fn default_k_factors() -> Vec<f64> {
    vec![0.25, 1.0, 4.0]
}
fn default_mc_samples() -> usize {
    100_000
}
fn default_sparsity_tol() -> f64 {
    1e-9
}
fn default_probe_examples() -> usize {
    64
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            ms: default_ms(),
            sigmas: default_sigmas(),
            k_factors: default_k_factors(),
            mc_samples: default_mc_samples(),
            sparsity_tol: default_sparsity_tol(),
            probe_examples: default_probe_examples(),
        }
    }
}

impl AnalysisSpec {
    fn validate(&self, errors: &mut Vec<String>) {
        if self.ms.contains(&0) {
            errors.push("analysis.ms entries must be at least 1".into());
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            errors.push("analysis.sigmas entries must be positive".into());
        }
        if self.k_factors.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            errors.push("analysis.k_factors entries must be positive".into());
        }
        if self.mc_samples == 0 {
            errors.push("analysis.mc_samples must be at least 1".into());
        }
        if !(self.sparsity_tol >= 0.0) {
            errors.push("analysis.sparsity_tol must be >= 0".into());
        }
        if self.probe_examples == 0 {
            errors.push("analysis.probe_examples must be at least 1".into());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub dtype: DTypeName,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    /// Steps between metrics records; epoch ends are always logged.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub layers: BTreeMap<String, LayerSpec>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

fn default_epochs() -> usize {
    1
}
fn default_batch_size() -> usize {
    32
}
fn default_true() -> bool {
    true
}
fn default_log_every() -> usize {
    10
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<String>,
    pub deterministic: Option<bool>,
    pub log_every: Option<usize>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    load_config_with(path, &Overrides::default())
}

pub fn load_config_with(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::one(format!("cannot read {}: {e}", path.display())))?;
    parse_config_with(&text, overrides)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    parse_config_with(text, &Overrides::default())
}

/// Parses, applies overrides, fills defaults, then validates.
pub fn parse_config_with(text: &str, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::one(e.to_string()))?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out_dir {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(d) = overrides.deterministic {
        cfg.deterministic = d;
    }
    if let Some(l) = overrides.log_every {
        cfg.log_every = l;
    }
    cfg.fill_defaults();
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    fn fill_defaults(&mut self) {
        self.dataset.fill_defaults(self.seed);
        self.model.fill_defaults();
        for spec in self.layers.values_mut() {
            spec.fill_defaults();
        }
    }

    /// TOML with every default written out.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn dtype(&self) -> DType {
        self.dtype.into()
    }

    /// `(name, input depth)` for every layer that accepts a section.
    pub fn layer_slots(&self) -> Vec<(String, usize)> {
        match self.model.kind {
            ModelKind::Mlp => {
                let d_in = self.dataset.input_dim().unwrap_or(0);
                let hidden = self.model.hidden.clone().unwrap_or_default();
                std::iter::once(d_in)
                    .chain(hidden)
                    .enumerate()
                    .map(|(i, d)| (format!("layer{i}"), d))
                    .collect()
            }
            ModelKind::Transformer => {
                let d = self.model.d_model.unwrap_or(0);
                let ff = self.model.d_ff.unwrap_or(0);
                TRANSFORMER_ROLES
                    .iter()
                    .map(|&r| (r.to_string(), if r == "down" { ff } else { d }))
                    .collect()
            }
        }
    }

    /// The section for `name`, or full backprop if absent.
    pub fn layer(&self, name: &str) -> LayerSpec {
        self.layers.get(name).cloned().unwrap_or_default()
    }

    pub fn transformer_policies(&self) -> TransformerPolicies {
        let p = |r: &str| self.layer(r).policy();
        TransformerPolicies {
            attention: AttentionPolicies {
                query: p("query"),
                key: p("key"),
                value: p("value"),
                output: p("output"),
            },
            up: p("up"),
            down: p("down"),
            head: p("head"),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        if self.batch_size == 0 {
            errors.push("batch_size must be at least 1".into());
        }
        if self.log_every == 0 {
            errors.push("log_every must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            errors.push(format!("optimizer.lr must be finite and >= 0 (got {})", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            errors.push("optimizer betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) {
            errors.push("optimizer.eps must be positive".into());
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            errors.push("optimizer.weight_decay must be finite and >= 0".into());
        }
        self.dataset.validate(&mut errors);
        self.analysis.validate(&mut errors);

        match (self.model.kind, self.dataset.kind) {
            (ModelKind::Mlp, DatasetKind::CharLm) => errors.push("model.kind mlp cannot train on char_lm data".into()),
            (ModelKind::Transformer, DatasetKind::CharLm) => {}
            (ModelKind::Transformer, k) => errors.push(format!("model.kind transformer needs char_lm data, not {}", k.tag())),
            _ => {}
        }
        match self.model.kind {
            ModelKind::Mlp => {
                for (key, present) in [
                    ("d_model", self.model.d_model.is_some()),
                    ("d_ff", self.model.d_ff.is_some()),
                    ("blocks", self.model.blocks.is_some()),
                ] {
                    if present {
                        errors.push(format!("model.{key} only applies to transformer models"));
                    }
                }
                if self.model.hidden.iter().flatten().any(|&h| h == 0) {
                    errors.push("model.hidden widths must be at least 1".into());
                }
                if let Some(l) = &self.model.lora {
                    if l.rank == 0 {
                        errors.push("model.lora.rank must be at least 1".into());
                    }
                    if !l.alpha.is_finite() {
                        errors.push("model.lora.alpha must be finite".into());
                    }
                }
            }
            ModelKind::Transformer => {
                if self.model.hidden.is_some() {
                    errors.push("model.hidden only applies to mlp models".into());
                }
                if self.model.lora.is_some() {
                    errors.push("model.lora only applies to mlp models".into());
                }
                for (key, v) in [("d_model", self.model.d_model), ("d_ff", self.model.d_ff), ("blocks", self.model.blocks)] {
                    if v == Some(0) {
                        errors.push(format!("model.{key} must be at least 1"));
                    }
                }
            }
        }

        let slots = self.layer_slots();
        for (name, spec) in &self.layers {
            match slots.iter().find(|(s, _)| s == name) {
                None => {
                    let known: Vec<&str> = slots.iter().map(|(s, _)| s.as_str()).collect();
                    errors.push(format!("unknown layer section [layers.{name}] (expected one of {})", known.join(", ")));
                }
                Some((_, d_in)) => {
                    // with LoRA, the policy applies to the adapter's down projection,
                    // which sees the same input as the base layer
                    spec.validate(name, *d_in, &mut errors);
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { errors })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
[dataset]
kind = "synthetic_regression"
[model]
kind = "mlp"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.epochs, 1);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.dtype, DTypeName::F64);
        assert!(cfg.deterministic);
        assert_eq!(cfg.optimizer, OptimizerSpec::default());
        assert_eq!(cfg.dataset.n, Some(2048));
        assert_eq!(cfg.dataset.d_in, Some(64));
        assert_eq!(cfg.dataset.seed, Some(7));
        assert_eq!(cfg.model.hidden, Some(vec![64]));
        assert!(cfg.layers.is_empty());
    }

    #[test]
    fn indivisible_m_names_the_layer() {
        let text = format!("{MINIMAL}\n[layers.layer0]\nsave_policy = \"velora\"\nm = 3\n");
        let text = text.replace("kind = \"synthetic_regression\"", "kind = \"synthetic_regression\"\nd_in = 8");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.errors.len(), 1);
        assert!(err.errors[0].contains("layer0") && err.errors[0].contains("M=3") && err.errors[0].contains("D=8"));
    }

    #[test]
    fn all_problems_reported_together() {
        let text = MINIMAL.replace("seed = 7", "seed = 7\nbatch_size = 0\nlog_every = 0") + "\n[layers.nope]\n";
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.errors.len(), 3, "{err}");
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in [
            MINIMAL.replace("seed = 7", "seed = 7\nepohcs = 3"),
            MINIMAL.replace("kind = \"mlp\"", "kind = \"mlp\"\nwidth = 3"),
            format!("{MINIMAL}\n[layers.layer0]\nsave_polcy = \"full\"\n"),
        ] {
            assert!(parse_config(&text).is_err(), "{text}");
        }
    }

    #[test]
    fn seed_is_required() {
        assert!(parse_config(&MINIMAL.replace("seed = 7", "")).is_err());
    }

    #[test]
    fn canonical_roundtrip() {
        let text = format!(
            "{MINIMAL}\n[layers.layer1]\nsave_policy = \"velora\"\nm = 8\ninit = \"running_average\"\n[optimizer]\nlr = 0.0123456789\n"
        );
        let cfg = parse_config(&text).unwrap();
        let canon = cfg.to_canonical();
        let again = parse_config(&canon).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(canon, again.to_canonical());
    }

    #[test]
    fn overrides_apply_before_defaults() {
        let o = Overrides {
            seed: Some(99),
            log_every: Some(3),
            ..Overrides::default()
        };
        let cfg = parse_config_with(MINIMAL, &o).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.dataset.seed, Some(99));
        assert_eq!(cfg.log_every, 3);
    }

    #[test]
    fn transformer_roles_and_depths() {
        let text = r#"
seed = 1
[dataset]
kind = "char_lm"
[model]
kind = "transformer"
d_model = 32
d_ff = 128
[layers.value]
save_policy = "velora"
m = 4
[layers.down]
save_policy = "velora"
m = 16
"#;
        let cfg = parse_config(text).unwrap();
        let p = cfg.transformer_policies();
        assert!(matches!(p.attention.value, SavePolicy::Velora(c) if c.m == 4 && c.init == InitStrategy::FixedAverage));
        assert!(matches!(p.down, SavePolicy::Velora(c) if c.m == 16));
        assert_eq!(p.attention.query, SavePolicy::Full);
        let bad = text.replace("m = 16", "m = 48");
        assert!(parse_config(&bad).unwrap_err().errors[0].contains("down"));
    }
}
