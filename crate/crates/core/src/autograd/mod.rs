//! Manually differentiated layers.
//!
//! Every layer has an explicit forward that records what it needs in a
//! [`BackwardCache`] according to its [`SavePolicy`], and an explicit backward
//! that reads it back. Under the velora policy a dense layer stores only the
//! compressed sub-tokens of its input; the weight gradient is formed from the
//! reconstruction while the input gradient keeps using the true weights.

mod blocks;
mod cache;
mod dense;
mod lora;
mod loss;
mod model;
mod optim;

pub use blocks::{AttentionBlock, AttentionPolicies, MlpBlock, TransformerBlock};
pub use cache::{BackwardCache, Saved};
pub use dense::{dense_backward, dense_forward, velora_update_rule_oracle, DenseGrads, DenseLayer};
pub use lora::{lora_backward, lora_forward, LoraDenseLayer, LoraGrads};
pub use loss::{cross_entropy_loss, mse_loss};
pub use model::{CharTransformer, Embedding, Input, Network, Sequential, StackLayer, TransformerPolicies};
pub use optim::{adamw_step, sgd_step, AdamMoments, Optimizer, OptimizerKind};

use crate::compression::{InitStrategy, DEFAULT_MOMENTUM};
use crate::memledger::PolicyTag;
use crate::{DType, Result, Tensor};

/// Settings for a compressed layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VeloraConfig {
    /// Sub-token size; must divide the layer's input depth.
    pub m: usize,
    pub init: InitStrategy,
    /// Only read by [`InitStrategy::RunningAverage`].
    pub momentum: f64,
    /// Power iterations for [`InitStrategy::Svd`].
    pub svd_iters: usize,
}

impl VeloraConfig {
    pub fn new(m: usize, init: InitStrategy) -> Self {
        Self {
            m,
            init,
            momentum: DEFAULT_MOMENTUM,
            svd_iters: 100,
        }
    }
}

/// What a layer keeps from its forward input for the weight gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SavePolicy {
    Full,
    Velora(VeloraConfig),
    /// Frozen layer: nothing saved, no parameter gradient.
    None,
}

impl SavePolicy {
    pub fn tag(&self) -> PolicyTag {
        match self {
            SavePolicy::Full => PolicyTag::Full,
            SavePolicy::Velora(_) => PolicyTag::Velora,
            SavePolicy::None => PolicyTag::None,
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, SavePolicy::None)
    }
}

/// A named parameter with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Always held at f64, whatever the parameter dtype.
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            frozen: false,
        }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn dtype(&self) -> DType {
        self.value.dtype()
    }

    /// Adds `g` into the gradient slot.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        let g = g.to_dtype(DType::F64);
        self.grad = Some(match self.grad.take() {
            Some(acc) => acc.add(&g)?,
            None => g,
        });
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
