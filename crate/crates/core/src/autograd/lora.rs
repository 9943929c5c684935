use crate::autograd::{dense_backward, BackwardCache, DenseLayer, Param, SavePolicy};
use crate::{DType, Error, Result, Tensor};

/// Frozen base projection plus a trainable low-rank adapter:
/// `out = x·W + α·(x·A)·B`, with `B` starting at zero.
///
/// `A` and `B` are ordinary dense layers, so each carries its own save
/// policy. `A` is the adapter's down projection; freezing it gives the
/// fixed-`A₀` analysis mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraDenseLayer {
    id: String,
    pub base: DenseLayer,
    pub a: DenseLayer,
    pub b: DenseLayer,
    alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub grad_in: Tensor,
    pub grad_a: Option<Tensor>,
    pub grad_b: Option<Tensor>,
}

impl LoraDenseLayer {
    /// `a_policy` of [`SavePolicy::None`] freezes `A`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        a_policy: SavePolicy,
        b_policy: SavePolicy,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        let id = id.into();
        let base = DenseLayer::new(format!("{id}.base"), d_in, d_out, true, SavePolicy::None, dtype, seed)?;
        let a = DenseLayer::new(format!("{id}.lora_a"), d_in, rank, false, a_policy, dtype, seed.wrapping_add(1))?;
        let b_zero = Tensor::zeros(&[rank, d_out])?.to_dtype(dtype);
        let b = DenseLayer::from_weights(format!("{id}.lora_b"), b_zero, None, b_policy, seed.wrapping_add(2))?;
        Self::from_parts(id, base, a, b, alpha)
    }

    pub fn from_parts(id: impl Into<String>, base: DenseLayer, a: DenseLayer, b: DenseLayer, alpha: f64) -> Result<Self> {
        let id = id.into();
        if !base.policy().is_frozen() {
            return Err(Error::Precondition(format!("layer {id}: LoRA base weights must be frozen")));
        }
        if a.d_in() != base.d_in() || a.d_out() != b.d_in() || b.d_out() != base.d_out() {
            return Err(Error::Dimension {
                op: "lora",
                lhs: vec![a.d_in(), a.d_out(), b.d_in(), b.d_out()],
                rhs: vec![base.d_in(), base.d_out()],
            });
        }
        Ok(Self { id, base, a, b, alpha })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn rank(&self) -> usize {
        self.a.d_out()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn d_in(&self) -> usize {
        self.base.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.base.d_out()
    }

    pub fn forward(&mut self, x: &Tensor, cache: Option<&mut BackwardCache>) -> Result<Tensor> {
        lora_forward(self, x, cache)
    }

    pub fn backward(&mut self, grad_out: &Tensor, cache: &BackwardCache) -> Result<Tensor> {
        let grads = lora_backward(self, grad_out, cache)?;
        if let Some(ga) = &grads.grad_a {
            self.a.weight.accumulate(ga)?;
        }
        if let Some(gb) = &grads.grad_b {
            self.b.weight.accumulate(gb)?;
        }
        Ok(grads.grad_in)
    }

    /// `W + α·A·B`, the weight the layer currently applies.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let ab = self.a.weight.value.matmul(&self.b.weight.value)?;
        self.base.weight.value.add(&ab.scale(self.alpha))
    }

    pub fn dense_layers(&self) -> [&DenseLayer; 3] {
        [&self.base, &self.a, &self.b]
    }

    pub fn dense_layers_mut(&mut self) -> [&mut DenseLayer; 3] {
        [&mut self.base, &mut self.a, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Param> {
        self.dense_layers().into_iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let [base, a, b] = self.dense_layers_mut();
        base.params_mut().into_iter().chain(a.params_mut()).chain(b.params_mut()).collect()
    }
}

pub fn lora_forward(layer: &mut LoraDenseLayer, x: &Tensor, mut cache: Option<&mut BackwardCache>) -> Result<Tensor> {
    let base = layer.base.forward(x, cache.as_deref_mut())?;
    let h = layer.a.forward(x, cache.as_deref_mut())?;
    let adapter = layer.b.forward(&h, cache)?;
    base.add(&adapter.scale(layer.alpha))
}

/// `grad_b = α·(x·A)ᵀ·grad_out` from whatever `B`'s forward kept, `grad_a`
/// likewise through `B`, and nothing for the base weights.
pub fn lora_backward(layer: &LoraDenseLayer, grad_out: &Tensor, cache: &BackwardCache) -> Result<LoraGrads> {
    let b = dense_backward(&layer.b, &grad_out.scale(layer.alpha), cache)?;
    let a = dense_backward(&layer.a, &b.grad_in, cache)?;
    let base = dense_backward(&layer.base, grad_out, cache)?;
    Ok(LoraGrads {
        grad_in: base.grad_in.add(&a.grad_in)?,
        grad_a: a.grad_weight,
        grad_b: b.grad_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Distribution;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::seeded_fill(shape, Distribution::Normal { mean: 0.0, std: 1.0 }, seed).unwrap()
    }

    #[test]
    fn zero_b_reproduces_base_output() {
        let mut l = LoraDenseLayer::new("q", 6, 4, 2, 1.0, SavePolicy::Full, SavePolicy::Full, DType::F64, 3).unwrap();
        let x = randn(&[2, 3, 6], 1);
        let out = l.forward(&x, None).unwrap();
        let base = l.base.forward(&x, None).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn identity_adapter_adds_b() {
        let w = randn(&[3, 3], 1);
        let bw = randn(&[3, 3], 2);
        let base = DenseLayer::from_weights("l.base", w.clone(), None, SavePolicy::None, 0).unwrap();
        let a = DenseLayer::from_weights("l.lora_a", Tensor::eye(3).unwrap(), None, SavePolicy::Full, 0).unwrap();
        let b = DenseLayer::from_weights("l.lora_b", bw.clone(), None, SavePolicy::Full, 0).unwrap();
        let mut l = LoraDenseLayer::from_parts("l", base, a, b, 1.0).unwrap();
        let x = randn(&[4, 3], 3);
        let out = l.forward(&x, None).unwrap();
        let expect = x.matmul(&w.add(&bw).unwrap()).unwrap();
        for (p, q) in out.data().iter().zip(expect.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_a_returns_only_grad_b() {
        let mut l = LoraDenseLayer::new("q", 4, 4, 2, 0.5, SavePolicy::None, SavePolicy::Full, DType::F64, 3).unwrap();
        let mut cache = BackwardCache::new();
        let x = randn(&[3, 4], 1);
        l.forward(&x, Some(&mut cache)).unwrap();
        let g = lora_backward(&l, &randn(&[3, 4], 2), &cache).unwrap();
        assert!(g.grad_a.is_none());
        assert!(g.grad_b.is_some());
        // only the adapter path saves anything: B's input x·A
        assert_eq!(cache.stored_scalars(), 3 * 2);
    }

    #[test]
    fn base_must_be_frozen() {
        let base = DenseLayer::new("b", 2, 2, false, SavePolicy::Full, DType::F64, 0).unwrap();
        let a = DenseLayer::new("a", 2, 1, false, SavePolicy::Full, DType::F64, 0).unwrap();
        let b = DenseLayer::new("c", 1, 2, false, SavePolicy::Full, DType::F64, 0).unwrap();
        assert!(LoraDenseLayer::from_parts("l", base, a, b, 1.0).is_err());
    }
}
