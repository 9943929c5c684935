//! Whole networks: a dense stack for vector data and a small character-level
//! transformer.

use crate::autograd::{
    AttentionBlock, AttentionPolicies, BackwardCache, DenseLayer, LoraDenseLayer, MlpBlock, Param, SavePolicy,
    TransformerBlock,
};
use crate::memledger::MemoryLedger;
use crate::tensor::Distribution;
use crate::{DType, Error, Result, Tensor};

/// Token lookup table `[vocab, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    id: String,
    pub table: Param,
}

impl Embedding {
    pub fn new(id: impl Into<String>, vocab: usize, d_model: usize, std: f64, dtype: DType, seed: u64) -> Result<Self> {
        let id = id.into();
        let table = Tensor::seeded_fill(&[vocab, d_model], Distribution::Normal { mean: 0.0, std }, seed)?;
        Ok(Self {
            table: Param::new(format!("{id}.table"), table.to_dtype(dtype)),
            id,
        })
    }

    pub fn vocab(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.table.value.shape()[1]
    }

    /// `ids` is `batch × len`, row-major; returns `[batch, len, d_model]`.
    pub fn forward(&self, ids: &[usize], batch: usize, len: usize, cache: Option<&mut BackwardCache>) -> Result<Tensor> {
        if ids.len() != batch * len || batch == 0 || len == 0 {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: vec![ids.len()],
                rhs: vec![batch, len],
            });
        }
        let (vocab, d) = (self.vocab(), self.d_model());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &t in ids {
            if t >= vocab {
                return Err(Error::Domain(format!("token {t} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(&self.table.value.data()[t * d..(t + 1) * d]);
        }
        if let Some(c) = cache {
            c.insert_tokens(&self.id, ids.to_vec(), batch, len);
        }
        Tensor::with_dtype(vec![batch, len, d], out, self.table.dtype())
    }

    pub fn backward(&mut self, grad_out: &Tensor, cache: &BackwardCache) -> Result<()> {
        let (ids, _, _) = cache.tokens(&self.id)?;
        let d = self.d_model();
        if grad_out.numel() != ids.len() * d {
            return Err(Error::Dimension {
                op: "embedding backward",
                lhs: grad_out.shape().to_vec(),
                rhs: vec![ids.len(), d],
            });
        }
        let mut g = Tensor::zeros(self.table.value.shape())?;
        for (row, &t) in grad_out.data().chunks(d).zip(ids) {
            for (acc, x) in g.data_mut()[t * d..(t + 1) * d].iter_mut().zip(row) {
                *acc += x;
            }
        }
        self.table.accumulate(&g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StackLayer {
    Dense(DenseLayer),
    Lora(LoraDenseLayer),
}

impl StackLayer {
    pub fn id(&self) -> &str {
        match self {
            StackLayer::Dense(l) => l.id(),
            StackLayer::Lora(l) => l.id(),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            StackLayer::Dense(l) => l.d_in(),
            StackLayer::Lora(l) => l.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            StackLayer::Dense(l) => l.d_out(),
            StackLayer::Lora(l) => l.d_out(),
        }
    }

    fn forward(&mut self, x: &Tensor, cache: Option<&mut BackwardCache>) -> Result<Tensor> {
        match self {
            StackLayer::Dense(l) => l.forward(x, cache),
            StackLayer::Lora(l) => l.forward(x, cache),
        }
    }

    fn backward(&mut self, g: &Tensor, cache: &BackwardCache) -> Result<Tensor> {
        match self {
            StackLayer::Dense(l) => l.backward(g, cache),
            StackLayer::Lora(l) => l.backward(g, cache),
        }
    }

    fn dense_layers(&self) -> Vec<&DenseLayer> {
        match self {
            StackLayer::Dense(l) => vec![l],
            StackLayer::Lora(l) => l.dense_layers().to_vec(),
        }
    }

    fn dense_layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        match self {
            StackLayer::Dense(l) => vec![l],
            StackLayer::Lora(l) => l.dense_layers_mut().into_iter().collect(),
        }
    }
}

/// Dense or LoRA layers with a relu between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<StackLayer>,
}

impl Sequential {
    pub fn new(layers: Vec<StackLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Precondition("a layer stack needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Dimension {
                    op: "layer stack",
                    lhs: vec![pair[0].d_in(), pair[0].d_out()],
                    rhs: vec![pair[1].d_in(), pair[1].d_out()],
                });
            }
        }
        Ok(Self { layers })
    }

    /// A two-layer stack is exactly an [`MlpBlock`].
    pub fn from_mlp(block: MlpBlock) -> Self {
        Self {
            layers: vec![StackLayer::Dense(block.up), StackLayer::Dense(block.down)],
        }
    }

    pub fn forward(&mut self, x: &Tensor, mut cache: Option<&mut BackwardCache>) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let out = layer.forward(&h, cache.as_deref_mut())?;
            h = if i < last {
                if let Some(c) = cache.as_deref_mut() {
                    c.insert_aux(format!("{}.relu_mask", layer.id()), out.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                }
                out.relu()
            } else {
                out
            };
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad_out: &Tensor, cache: &BackwardCache) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            if i < last {
                g = g.mul(cache.aux(&format!("{}.relu_mask", layer.id()))?)?;
            }
            g = layer.backward(&g, cache)?;
        }
        Ok(g)
    }

    pub fn dense_layers(&self) -> Vec<&DenseLayer> {
        self.layers.iter().flat_map(StackLayer::dense_layers).collect()
    }

    pub fn dense_layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        self.layers.iter_mut().flat_map(StackLayer::dense_layers_mut).collect()
    }
}

/// Save policy per projection role, applied to every block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerPolicies {
    pub attention: AttentionPolicies,
    pub up: SavePolicy,
    pub down: SavePolicy,
    pub head: SavePolicy,
}

impl Default for TransformerPolicies {
    fn default() -> Self {
        Self {
            attention: AttentionPolicies::default(),
            up: SavePolicy::Full,
            down: SavePolicy::Full,
            head: SavePolicy::Full,
        }
    }
}

/// Token + learned position embeddings, a stack of causal transformer
/// blocks, and a dense head onto the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CharTransformer {
    pub tokens: Embedding,
    pub positions: Param,
    pub blocks: Vec<TransformerBlock>,
    pub head: DenseLayer,
}

impl CharTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vocab: usize,
        context: usize,
        d_model: usize,
        d_ff: usize,
        n_blocks: usize,
        policies: TransformerPolicies,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        let tokens = Embedding::new("embed", vocab, d_model, 0.5, dtype, seed)?;
        let positions = Tensor::seeded_fill(&[context, d_model], Distribution::Normal { mean: 0.0, std: 0.1 }, seed ^ 0x5eed)?;
        let blocks = (0..n_blocks)
            .map(|i| {
                let s = seed.wrapping_add(100 * (i as u64 + 1));
                Ok(TransformerBlock {
                    attention: AttentionBlock::new(format!("block{i}.attn"), d_model, policies.attention, true, dtype, s)?,
                    mlp: MlpBlock::new(format!("block{i}.mlp"), d_model, d_ff, policies.up, policies.down, dtype, s + 50)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = DenseLayer::new("head", d_model, vocab, true, policies.head, dtype, seed.wrapping_add(7))?;
        Ok(Self {
            tokens,
            positions: Param::new("positions", positions.to_dtype(dtype)),
            blocks,
            head,
        })
    }

    pub fn context(&self) -> usize {
        self.positions.value.shape()[0]
    }

    pub fn vocab(&self) -> usize {
        self.tokens.vocab()
    }

    /// Returns logits `[batch, len, vocab]`.
    pub fn forward(&mut self, ids: &[usize], batch: usize, len: usize, mut cache: Option<&mut BackwardCache>) -> Result<Tensor> {
        if len > self.context() {
            return Err(Error::Dimension {
                op: "transformer context",
                lhs: vec![len],
                rhs: vec![self.context()],
            });
        }
        let mut x = self.tokens.forward(ids, batch, len, cache.as_deref_mut())?;
        let d = self.tokens.d_model();
        let pos = &self.positions.value.data()[..len * d];
        let dtype = x.dtype();
        for seq in x.data_mut().chunks_mut(len * d) {
            for (a, p) in seq.iter_mut().zip(pos) {
                *a = dtype.round(*a + p);
            }
        }
        for block in &mut self.blocks {
            x = block.forward(&x, cache.as_deref_mut())?;
        }
        self.head.forward(&x, cache)
    }

    pub fn backward(&mut self, grad_logits: &Tensor, cache: &BackwardCache) -> Result<()> {
        let mut g = self.head.backward(grad_logits, cache)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g, cache)?;
        }
        let d = self.tokens.d_model();
        let len = g.shape()[1];
        let mut gp = Tensor::zeros(self.positions.value.shape())?;
        for seq in g.data().chunks(len * d) {
            for (acc, x) in gp.data_mut().iter_mut().zip(seq) {
                *acc += x;
            }
        }
        self.positions.accumulate(&gp)?;
        self.tokens.backward(&g, cache)
    }

    pub fn dense_layers(&self) -> Vec<&DenseLayer> {
        let mut v: Vec<&DenseLayer> = self.blocks.iter().flat_map(TransformerBlock::dense_layers).collect();
        v.push(&self.head);
        v
    }

    pub fn dense_layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut v: Vec<&mut DenseLayer> = self.blocks.iter_mut().flat_map(TransformerBlock::dense_layers_mut).collect();
        v.push(&mut self.head);
        v
    }
}

/// A batch fed to a [`Network`].
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Dense(&'a Tensor),
    Tokens { ids: &'a [usize], batch: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Sequential(Sequential),
    Transformer(CharTransformer),
}

impl Network {
    pub fn forward(&mut self, input: Input<'_>, cache: Option<&mut BackwardCache>) -> Result<Tensor> {
        match (self, input) {
            (Network::Sequential(s), Input::Dense(x)) => s.forward(x, cache),
            (Network::Transformer(t), Input::Tokens { ids, batch, len }) => t.forward(ids, batch, len, cache),
            _ => Err(Error::Precondition("input kind does not match the network".into())),
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor, cache: &BackwardCache) -> Result<()> {
        match self {
            Network::Sequential(s) => s.backward(grad_out, cache).map(drop),
            Network::Transformer(t) => t.backward(grad_out, cache),
        }
    }

    pub fn dense_layers(&self) -> Vec<&DenseLayer> {
        match self {
            Network::Sequential(s) => s.dense_layers(),
            Network::Transformer(t) => t.dense_layers(),
        }
    }

    pub fn dense_layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        match self {
            Network::Sequential(s) => s.dense_layers_mut(),
            Network::Transformer(t) => t.dense_layers_mut(),
        }
    }

    /// Every parameter in a fixed order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        if let Network::Transformer(t) = self {
            out.push(&t.tokens.table);
            out.push(&t.positions);
        }
        out.extend(self.dense_layers().into_iter().flat_map(|l| l.params()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Network::Sequential(s) => s.dense_layers_mut().into_iter().flat_map(|l| l.params_mut()).collect(),
            Network::Transformer(t) => {
                let CharTransformer {
                    tokens,
                    positions,
                    blocks,
                    head,
                } = t;
                let mut out = vec![&mut tokens.table, positions];
                out.extend(blocks.iter_mut().flat_map(|b| b.dense_layers_mut()).flat_map(|l| l.params_mut()));
                out.extend(head.params_mut());
                out
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Expected backward-cache contents for one forward pass, computed from
    /// shapes alone. Every dense layer sees `leading ++ [d_in]`, where
    /// `leading` is `[B]` or `[B, N]`. Velora layers add a line item for
    /// their projection vector.
    pub fn memory_ledger(&self, leading: &[usize]) -> Result<MemoryLedger> {
        let mut ledger = MemoryLedger::new();
        for layer in self.dense_layers() {
            let mut shape = leading.to_vec();
            shape.push(layer.d_in());
            let m = match layer.policy() {
                SavePolicy::Velora(cfg) => cfg.m,
                _ => 1,
            };
            ledger.record(layer.id(), layer.policy().tag(), &shape, m, layer.weight.dtype())?;
            if let SavePolicy::Velora(cfg) = layer.policy() {
                ledger.record_projection(layer.id(), cfg.m, DType::F64);
            }
        }
        Ok(ledger)
    }
}
