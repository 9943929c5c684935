use std::collections::BTreeMap;

use crate::compression::CompressedActivation;
use crate::{Error, Result, Tensor};

/// The one representation a layer kept from its forward input.
#[derive(Debug, Clone, PartialEq)]
pub enum Saved {
    Full(Tensor),
    Compressed(CompressedActivation),
    Nothing,
}

impl Saved {
    pub fn stored_scalars(&self) -> usize {
        match self {
            Saved::Full(t) => t.numel(),
            Saved::Compressed(ca) => ca.stored_scalars(),
            Saved::Nothing => 0,
        }
    }

    pub fn stored_bytes(&self) -> usize {
        match self {
            Saved::Full(t) => t.numel() * t.dtype().size_bytes(),
            Saved::Compressed(ca) => ca.stored_scalars() * ca.z_p().dtype().size_bytes(),
            Saved::Nothing => 0,
        }
    }
}

/// Everything a forward pass leaves for its backward pass.
///
/// `saved` holds the linear-layer inputs governed by save policies; `aux`
/// holds exact non-linearity state (relu masks, attention probabilities) and
/// `tokens` the integer inputs of embeddings. Only `saved` is what the
/// memory ledger accounts for.
#[derive(Debug, Clone, Default)]
pub struct BackwardCache {
    saved: BTreeMap<String, Saved>,
    aux: BTreeMap<String, Tensor>,
    tokens: BTreeMap<String, (Vec<usize>, usize, usize)>,
    captured: Option<BTreeMap<String, Tensor>>,
}

impl BackwardCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// A cache that additionally keeps every dense layer's exact input,
    /// whatever its policy. Used for diagnostics; captured inputs are not
    /// part of the stored totals.
    pub fn capturing() -> Self {
        Self {
            captured: Some(BTreeMap::new()),
            ..Self::default()
        }
    }

    pub fn clear(&mut self) {
        self.saved.clear();
        self.aux.clear();
        self.tokens.clear();
        if let Some(c) = self.captured.as_mut() {
            c.clear();
        }
    }

    pub(crate) fn capture(&mut self, layer_id: &str, x: &Tensor) {
        if let Some(c) = self.captured.as_mut() {
            c.insert(layer_id.to_string(), x.clone());
        }
    }

    pub fn captured_inputs(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.captured.iter().flatten().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, layer_id: &str, saved: Saved) -> Result<()> {
        if self.saved.contains_key(layer_id) {
            return Err(Error::State(format!(
                "layer {layer_id} saved twice in one forward pass"
            )));
        }
        self.saved.insert(layer_id.to_string(), saved);
        Ok(())
    }

    pub fn get(&self, layer_id: &str) -> Result<&Saved> {
        self.saved.get(layer_id).ok_or_else(|| {
            Error::State(format!("backward on layer {layer_id} without a matching forward"))
        })
    }

    pub fn saved(&self) -> impl Iterator<Item = (&str, &Saved)> {
        self.saved.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert_aux(&mut self, key: String, t: Tensor) {
        self.aux.insert(key, t);
    }

    pub fn aux(&self, key: &str) -> Result<&Tensor> {
        self.aux
            .get(key)
            .ok_or_else(|| Error::State(format!("missing cached state {key}; run forward first")))
    }

    pub(crate) fn insert_tokens(&mut self, key: &str, ids: Vec<usize>, batch: usize, len: usize) {
        self.tokens.insert(key.to_string(), (ids, batch, len));
    }

    pub(crate) fn tokens(&self, key: &str) -> Result<&(Vec<usize>, usize, usize)> {
        self.tokens
            .get(key)
            .ok_or_else(|| Error::State(format!("missing token ids for {key}; run forward first")))
    }

    /// Scalars held for weight gradients, summed over layers.
    pub fn stored_scalars(&self) -> usize {
        self.saved.values().map(Saved::stored_scalars).sum()
    }

    pub fn stored_bytes(&self) -> usize {
        self.saved.values().map(Saved::stored_bytes).sum()
    }
}
