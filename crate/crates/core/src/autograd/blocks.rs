//! Blocks composed from dense layers.

use crate::autograd::{BackwardCache, DenseLayer, Param, SavePolicy};
use crate::{DType, Error, Result, Tensor};

/// `dense → relu → dense`; the second layer is the down projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock {
    id: String,
    pub up: DenseLayer,
    pub down: DenseLayer,
}

impl MlpBlock {
    pub fn new(id: impl Into<String>, d_model: usize, d_hidden: usize, up: SavePolicy, down: SavePolicy, dtype: DType, seed: u64) -> Result<Self> {
        let id = id.into();
        Ok(Self {
            up: DenseLayer::new(format!("{id}.up"), d_model, d_hidden, true, up, dtype, seed)?,
            down: DenseLayer::new(format!("{id}.down"), d_hidden, d_model, true, down, dtype, seed.wrapping_add(1))?,
            id,
        })
    }

    pub fn from_layers(id: impl Into<String>, up: DenseLayer, down: DenseLayer) -> Result<Self> {
        if up.d_out() != down.d_in() {
            return Err(Error::Dimension {
                op: "mlp block",
                lhs: vec![up.d_in(), up.d_out()],
                rhs: vec![down.d_in(), down.d_out()],
            });
        }
        Ok(Self { id: id.into(), up, down })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn forward(&mut self, x: &Tensor, mut cache: Option<&mut BackwardCache>) -> Result<Tensor> {
        let pre = self.up.forward(x, cache.as_deref_mut())?;
        let h = pre.relu();
        if let Some(c) = cache.as_deref_mut() {
            c.insert_aux(format!("{}.relu_mask", self.id), pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        }
        self.down.forward(&h, cache)
    }

    pub fn backward(&mut self, grad_out: &Tensor, cache: &BackwardCache) -> Result<Tensor> {
        let gh = self.down.backward(grad_out, cache)?;
        let mask = cache.aux(&format!("{}.relu_mask", self.id))?;
        let gpre = gh.mul(mask)?;
        self.up.backward(&gpre, cache)
    }

    pub fn dense_layers(&self) -> Vec<&DenseLayer> {
        vec![&self.up, &self.down]
    }

    pub fn dense_layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        vec![&mut self.up, &mut self.down]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.dense_layers_mut().into_iter().flat_map(|l| l.params_mut()).collect()
    }
}

/// Single-head scaled dot-product attention with dense Q, K, V and output
/// projections. Inputs are `[B, N, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    id: String,
    pub query: DenseLayer,
    pub key: DenseLayer,
    pub value: DenseLayer,
    pub output: DenseLayer,
    causal: bool,
}

/// Per-projection save policies for an attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionPolicies {
    pub query: SavePolicy,
    pub key: SavePolicy,
    pub value: SavePolicy,
    pub output: SavePolicy,
}

impl Default for AttentionPolicies {
    fn default() -> Self {
        Self {
            query: SavePolicy::Full,
            key: SavePolicy::Full,
            value: SavePolicy::Full,
            output: SavePolicy::Full,
        }
    }
}

impl AttentionBlock {
    pub fn new(id: impl Into<String>, d_model: usize, policies: AttentionPolicies, causal: bool, dtype: DType, seed: u64) -> Result<Self> {
        let id = id.into();
        let make = |name: &str, policy, k: u64| {
            DenseLayer::new(format!("{id}.{name}"), d_model, d_model, true, policy, dtype, seed.wrapping_add(k))
        };
        Ok(Self {
            query: make("query", policies.query, 0)?,
            key: make("key", policies.key, 1)?,
            value: make("value", policies.value, 2)?,
            output: make("output", policies.output, 3)?,
            id,
            causal,
        })
    }

    pub fn from_layers(id: impl Into<String>, query: DenseLayer, key: DenseLayer, value: DenseLayer, output: DenseLayer, causal: bool) -> Result<Self> {
        let d = query.d_in();
        if [key.d_in(), value.d_in()] != [d, d] || query.d_out() != key.d_out() || output.d_in() != value.d_out() {
            return Err(Error::Dimension {
                op: "attention block",
                lhs: vec![query.d_in(), query.d_out(), key.d_in(), key.d_out()],
                rhs: vec![value.d_in(), value.d_out(), output.d_in(), output.d_out()],
            });
        }
        Ok(Self {
            id: id.into(),
            query,
            key,
            value,
            output,
            causal,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn key_name(&self, what: &str) -> String {
        format!("{}.{what}", self.id)
    }

    pub fn forward(&mut self, x: &Tensor, mut cache: Option<&mut BackwardCache>) -> Result<Tensor> {
        let [_, n, _] = match *x.shape() {
            [b, n, d] => [b, n, d],
            _ => {
                return Err(Error::Rank {
                    op: "attention",
                    min: 3,
                    shape: x.shape().to_vec(),
                })
            }
        };
        let q = self.query.forward(x, cache.as_deref_mut())?;
        let k = self.key.forward(x, cache.as_deref_mut())?;
        let v = self.value.forward(x, cache.as_deref_mut())?;
        let scale = 1.0 / (self.query.d_out() as f64).sqrt();
        let mut scores = q.matmul(&k.transpose()?)?.scale(scale);
        if self.causal {
            for block in scores.data_mut().chunks_mut(n * n) {
                for i in 0..n {
                    for j in i + 1..n {
                        block[i * n + j] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let probs = scores.softmax_last_axis();
        let mixed = probs.matmul(&v)?;
        if let Some(c) = cache.as_deref_mut() {
            c.insert_aux(self.key_name("q"), q);
            c.insert_aux(self.key_name("k"), k);
            c.insert_aux(self.key_name("v"), v);
            c.insert_aux(self.key_name("probs"), probs);
        }
        self.output.forward(&mixed, cache)
    }

    pub fn backward(&mut self, grad_out: &Tensor, cache: &BackwardCache) -> Result<Tensor> {
        let g_mixed = self.output.backward(grad_out, cache)?;
        let q = cache.aux(&self.key_name("q"))?;
        let k = cache.aux(&self.key_name("k"))?;
        let v = cache.aux(&self.key_name("v"))?;
        let probs = cache.aux(&self.key_name("probs"))?;

        let g_probs = g_mixed.matmul(&v.transpose()?)?;
        let g_v = probs.transpose()?.matmul(&g_mixed)?;
        // softmax Jacobian-vector product, row by row
        let n = probs.last_dim();
        let scale = 1.0 / (self.query.d_out() as f64).sqrt();
        let mut g_scores = g_probs.clone();
        for (gs, p) in g_scores.data_mut().chunks_mut(n).zip(probs.data().chunks(n)) {
            let dot: f64 = gs.iter().zip(p).map(|(a, b)| a * b).sum();
            for (g, &pi) in gs.iter_mut().zip(p) {
                *g = pi * (*g - dot) * scale;
            }
        }
        let g_q = g_scores.matmul(k)?;
        let g_k = g_scores.transpose()?.matmul(q)?;

        let gx_q = self.query.backward(&g_q, cache)?;
        let gx_k = self.key.backward(&g_k, cache)?;
        let gx_v = self.value.backward(&g_v, cache)?;
        gx_q.add(&gx_k)?.add(&gx_v)
    }

    pub fn dense_layers(&self) -> Vec<&DenseLayer> {
        vec![&self.query, &self.key, &self.value, &self.output]
    }

    pub fn dense_layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        vec![&mut self.query, &mut self.key, &mut self.value, &mut self.output]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.dense_layers_mut().into_iter().flat_map(|l| l.params_mut()).collect()
    }
}

/// Pre-residual transformer block: `x + attn(x)`, then `h + mlp(h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub attention: AttentionBlock,
    pub mlp: MlpBlock,
}

impl TransformerBlock {
    pub fn forward(&mut self, x: &Tensor, mut cache: Option<&mut BackwardCache>) -> Result<Tensor> {
        let h = x.add(&self.attention.forward(x, cache.as_deref_mut())?)?;
        h.add(&self.mlp.forward(&h, cache)?)
    }

    pub fn backward(&mut self, grad_out: &Tensor, cache: &BackwardCache) -> Result<Tensor> {
        let gh = grad_out.add(&self.mlp.backward(grad_out, cache)?)?;
        gh.add(&self.attention.backward(&gh, cache)?)
    }

    pub fn dense_layers(&self) -> Vec<&DenseLayer> {
        let mut v = self.attention.dense_layers();
        v.extend(self.mlp.dense_layers());
        v
    }

    pub fn dense_layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut v = self.attention.dense_layers_mut();
        v.extend(self.mlp.dense_layers_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Distribution;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::seeded_fill(shape, Distribution::Normal { mean: 0.0, std: 1.0 }, seed).unwrap()
    }

    fn identity(id: &str, d: usize) -> DenseLayer {
        DenseLayer::from_weights(id, Tensor::eye(d).unwrap(), None, SavePolicy::Full, 0).unwrap()
    }

    #[test]
    fn identity_mlp_on_positive_input_is_identity() {
        let mut block = MlpBlock::from_layers("m", identity("m.up", 4), identity("m.down", 4)).unwrap();
        let x = randn(&[2, 3, 4], 1).map(f64::abs);
        assert_eq!(block.forward(&x, None).unwrap(), x);
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let d = 4;
        let mut block = AttentionBlock::new("a", d, AttentionPolicies::default(), false, DType::F64, 5).unwrap();
        block.output = identity("a.output", d);
        let x = randn(&[3, 1, d], 2);
        let out = block.forward(&x, None).unwrap();
        let v = block.value.forward(&x, None).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_first_token_sees_only_itself() {
        let d = 4;
        let mut block = AttentionBlock::new("a", d, AttentionPolicies::default(), true, DType::F64, 5).unwrap();
        let mut cache = BackwardCache::new();
        block.forward(&randn(&[1, 3, d], 2), Some(&mut cache)).unwrap();
        let p = cache.aux("a.probs").unwrap();
        assert_eq!(&p.data()[..3], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn attention_requires_rank_three() {
        let mut block = AttentionBlock::new("a", 2, AttentionPolicies::default(), false, DType::F64, 5).unwrap();
        assert!(block.forward(&randn(&[3, 2], 1), None).is_err());
    }
}
