use crate::autograd::{BackwardCache, Param, SavePolicy, Saved};
use crate::compression::{
    check_subtoken_size, compress_tokens, initialise, reconstruct_tokens, update_running_average,
    InitStrategy, ProjectionVector,
};
use crate::tensor::Distribution;
use crate::{DType, Error, Result, Tensor};

/// `out = x·W + b` with `W` stored as `[d_in, d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    id: String,
    pub weight: Param,
    pub bias: Option<Param>,
    policy: SavePolicy,
    projection: Option<ProjectionVector>,
    seed: u64,
}

/// Gradients produced by one dense backward.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub grad_in: Tensor,
    pub grad_weight: Option<Tensor>,
    pub grad_bias: Option<Tensor>,
}

impl DenseLayer {
    /// Gaussian weights with variance `1/d_in`, zero bias.
    pub fn new(
        id: impl Into<String>,
        d_in: usize,
        d_out: usize,
        bias: bool,
        policy: SavePolicy,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = Tensor::seeded_fill(&[d_in, d_out], Distribution::Normal { mean: 0.0, std }, seed)?;
        let b = bias.then(|| Tensor::zeros(&[d_out])).transpose()?;
        Self::from_weights(id, w.to_dtype(dtype), b.map(|b| b.to_dtype(dtype)), policy, seed)
    }

    pub fn from_weights(
        id: impl Into<String>,
        weight: Tensor,
        bias: Option<Tensor>,
        policy: SavePolicy,
        seed: u64,
    ) -> Result<Self> {
        let id = id.into();
        if weight.rank() != 2 {
            return Err(Error::Rank {
                op: "dense weight",
                min: 2,
                shape: weight.shape().to_vec(),
            });
        }
        let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = &bias {
            if b.shape() != [d_out] {
                return Err(Error::Dimension {
                    op: "dense bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![d_out],
                });
            }
        }
        if !weight.all_finite() {
            return Err(Error::Precondition(format!("layer {id}: non-finite weights")));
        }
        if let SavePolicy::Velora(cfg) = policy {
            check_subtoken_size(&id, d_in, cfg.m)?;
        }
        let frozen = policy.is_frozen();
        Ok(Self {
            weight: Param::new(format!("{id}.weight"), weight).frozen(frozen),
            bias: bias.map(|b| Param::new(format!("{id}.bias"), b).frozen(frozen)),
            id,
            policy,
            projection: None,
            seed,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn policy(&self) -> &SavePolicy {
        &self.policy
    }

    pub fn projection(&self) -> Option<&ProjectionVector> {
        self.projection.as_ref()
    }

    /// Installs a projection vector, e.g. when restoring a checkpoint.
    pub fn set_projection(&mut self, pv: ProjectionVector) -> Result<()> {
        match self.policy {
            SavePolicy::Velora(cfg) if cfg.m == pv.m() => {
                self.projection = Some(pv);
                Ok(())
            }
            _ => Err(Error::State(format!(
                "layer {} cannot take a projection vector of length {}",
                self.id,
                pv.m()
            ))),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn forward(&mut self, x: &Tensor, cache: Option<&mut BackwardCache>) -> Result<Tensor> {
        dense_forward(self, x, cache)
    }

    /// Runs [`dense_backward`] and accumulates the parameter gradients.
    pub fn backward(&mut self, grad_out: &Tensor, cache: &BackwardCache) -> Result<Tensor> {
        let grads = dense_backward(self, grad_out, cache)?;
        if let Some(gw) = &grads.grad_weight {
            self.weight.accumulate(gw)?;
        }
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), &grads.grad_bias) {
            b.accumulate(gb)?;
        }
        Ok(grads.grad_in)
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    /// Scalars this layer would save for an input of `shape`.
    pub fn saved_scalars_for(&self, shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        match self.policy {
            SavePolicy::Full => n,
            SavePolicy::Velora(cfg) => n / cfg.m,
            SavePolicy::None => 0,
        }
    }

    fn prepare_projection(&mut self, x: &Tensor) -> Result<()> {
        let SavePolicy::Velora(cfg) = self.policy else {
            return Ok(());
        };
        let subtokens = || x.clone().reshape(vec![x.numel() / cfg.m, cfg.m]);
        match self.projection.as_mut() {
            None => {
                let pv = initialise(&self.id, cfg.init, &subtokens()?, cfg.momentum, cfg.svd_iters, self.seed)?;
                self.projection = Some(pv);
            }
            Some(pv) if cfg.init == InitStrategy::RunningAverage => {
                update_running_average(pv, &subtokens()?)?;
            }
            Some(_) => {}
        }
        Ok(())
    }
}

fn check_input(layer: &DenseLayer, x: &Tensor) -> Result<()> {
    if x.rank() < 2 || x.last_dim() != layer.d_in() {
        return Err(Error::Dimension {
            op: "dense_forward",
            lhs: x.shape().to_vec(),
            rhs: layer.weight.value.shape().to_vec(),
        });
    }
    Ok(())
}

fn add_bias(out: &mut Tensor, bias: &Tensor) {
    let n = bias.numel();
    let dtype = out.dtype();
    for row in out.data_mut().chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o = dtype.round(*o + b);
        }
    }
}

/// Forward pass. With a cache, the input is saved according to the layer's
/// policy, and a velora layer initialises (or, for the running average,
/// updates) its projection vector from this batch first.
pub fn dense_forward(layer: &mut DenseLayer, x: &Tensor, cache: Option<&mut BackwardCache>) -> Result<Tensor> {
    check_input(layer, x)?;
    let mut out = x.matmul(&layer.weight.value)?;
    if let Some(b) = &layer.bias {
        add_bias(&mut out, &b.value);
    }
    if let Some(cache) = cache {
        cache.capture(&layer.id, x);
        let saved = match layer.policy {
            SavePolicy::Full => Saved::Full(x.clone()),
            SavePolicy::None => Saved::Nothing,
            SavePolicy::Velora(_) => {
                layer.prepare_projection(x)?;
                let pv = layer.projection.as_ref().expect("initialised above");
                Saved::Compressed(compress_tokens(x, pv)?)
            }
        };
        cache.insert(&layer.id, saved)?;
    }
    Ok(out)
}

/// Backward pass.
///
/// `grad_in = grad_out·Wᵀ` always uses the true weights. `grad_weight =
/// X̂ᵀ·grad_out` where `X̂` is whatever the forward kept: the input itself,
/// or `ungroup(reconstruct(z_p, v))` for a velora layer.
pub fn dense_backward(layer: &DenseLayer, grad_out: &Tensor, cache: &BackwardCache) -> Result<DenseGrads> {
    let saved = cache.get(&layer.id)?;
    if grad_out.rank() < 2 || grad_out.last_dim() != layer.d_out() {
        return Err(Error::Dimension {
            op: "dense_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: layer.weight.value.shape().to_vec(),
        });
    }
    let grad_in = grad_out.matmul(&layer.weight.value.transpose()?)?;
    let g_rows = grad_out.clone().flatten_rows();

    let input = match saved {
        Saved::Full(x) => Some(x.clone()),
        Saved::Compressed(ca) => {
            let pv = layer.projection.as_ref().ok_or_else(|| {
                Error::State(format!("layer {} has compressed input but no projection", layer.id))
            })?;
            if pv.generation() != ca.generation() {
                return Err(Error::State(format!(
                    "layer {}: projection vector changed between forward and backward",
                    layer.id
                )));
            }
            Some(reconstruct_tokens(ca, pv)?)
        }
        Saved::Nothing => None,
    };
    let grad_weight = match input {
        Some(x) => {
            let x_rows = x.flatten_rows();
            if x_rows.shape()[0] != g_rows.shape()[0] {
                return Err(Error::Dimension {
                    op: "dense_backward",
                    lhs: x_rows.shape().to_vec(),
                    rhs: g_rows.shape().to_vec(),
                });
            }
            Some(x_rows.transpose()?.matmul(&g_rows)?)
        }
        None => None,
    };
    let grad_bias = match (&layer.bias, layer.policy.is_frozen()) {
        (Some(_), false) => Some(g_rows.sum_axis(0)?),
        _ => None,
    };
    Ok(DenseGrads {
        grad_in,
        grad_weight,
        grad_bias,
    })
}

/// Closed-form weight after one SGD step on a velora layer with a single
/// sub-token per token (`M = D`): `W − η·vvᵀ·(Xᵀ·grad_out)`.
///
/// Written with plain loops over the raw buffers so it shares no code with
/// the compression path it is used to check. `W` is `[d_in, d_out]`.
pub fn velora_update_rule_oracle(w: &Tensor, grad_out: &Tensor, x: &Tensor, v: &[f64], eta: f64) -> Result<Tensor> {
    let (d_in, d_out) = match *w.shape() {
        [a, b] => (a, b),
        _ => {
            return Err(Error::Rank {
                op: "velora_update_rule_oracle",
                min: 2,
                shape: w.shape().to_vec(),
            })
        }
    };
    if v.len() != d_in {
        return Err(Error::Precondition(format!(
            "update-rule oracle needs M == D (got M={}, D={d_in})",
            v.len()
        )));
    }
    let rows = x.numel() / d_in;
    if x.last_dim() != d_in || grad_out.last_dim() != d_out || grad_out.numel() / d_out != rows {
        return Err(Error::Dimension {
            op: "velora_update_rule_oracle",
            lhs: x.shape().to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let (xd, gd) = (x.data(), grad_out.data());
    // g̃ = Xᵀ·G
    let mut g_tilde = vec![0.0; d_in * d_out];
    for r in 0..rows {
        for i in 0..d_in {
            for j in 0..d_out {
                g_tilde[i * d_out + j] += xd[r * d_in + i] * gd[r * d_out + j];
            }
        }
    }
    // vᵀ·g̃ then the outer product with v
    let mut vt_g = vec![0.0; d_out];
    for i in 0..d_in {
        for j in 0..d_out {
            vt_g[j] += v[i] * g_tilde[i * d_out + j];
        }
    }
    let mut out = w.data().to_vec();
    for i in 0..d_in {
        for j in 0..d_out {
            out[i * d_out + j] -= eta * v[i] * vt_g[j];
        }
    }
    Tensor::with_dtype(vec![d_in, d_out], out, w.dtype())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::VeloraConfig;
    use crate::compression::{init_random, project};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::seeded_fill(shape, Distribution::Normal { mean: 0.0, std: 1.0 }, seed).unwrap()
    }

    fn velora(m: usize) -> SavePolicy {
        SavePolicy::Velora(VeloraConfig::new(m, InitStrategy::Random))
    }

    #[test]
    fn identity_weight_passes_input_through() {
        let mut layer = DenseLayer::from_weights("id", Tensor::eye(4).unwrap(), None, SavePolicy::Full, 0).unwrap();
        let x = randn(&[2, 3, 4], 1);
        assert_eq!(layer.forward(&x, None).unwrap(), x);
    }

    #[test]
    fn forward_matches_matmul_oracle_with_bias() {
        let w = randn(&[5, 3], 2);
        let b = randn(&[3], 3);
        let mut layer = DenseLayer::from_weights("l", w.clone(), Some(b.clone()), SavePolicy::Full, 0).unwrap();
        let x = randn(&[2, 5], 4);
        let out = layer.forward(&x, None).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                let s: f64 = (0..5).map(|i| x.at(&[r, i]) * w.at(&[i, j])).sum::<f64>() + b.data()[j];
                assert!((out.at(&[r, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn velora_cache_holds_compressed_count() {
        let mut layer = DenseLayer::new("v", 8, 3, true, velora(4), DType::F64, 1).unwrap();
        let mut cache = BackwardCache::new();
        layer.forward(&randn(&[2, 3, 8], 5), Some(&mut cache)).unwrap();
        assert_eq!(cache.stored_scalars(), 2 * 3 * 8 / 4);
        assert_eq!(layer.saved_scalars_for(&[2, 3, 8]), cache.stored_scalars());
    }

    #[test]
    fn velora_rejects_bad_m_at_construction() {
        let err = DenseLayer::new("bad", 8, 3, false, velora(3), DType::F64, 1).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let layer = DenseLayer::new("l", 4, 2, false, SavePolicy::Full, DType::F64, 1).unwrap();
        let err = dense_backward(&layer, &randn(&[1, 2], 1), &BackwardCache::new()).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn velora_grad_is_reconstruction_times_grad_out() {
        let mut layer = DenseLayer::new("v", 6, 4, false, velora(3), DType::F64, 9).unwrap();
        let x = randn(&[2, 2, 6], 6);
        let g = randn(&[2, 2, 4], 7);
        let mut cache = BackwardCache::new();
        layer.forward(&x, Some(&mut cache)).unwrap();
        let grads = dense_backward(&layer, &g, &cache).unwrap();
        // two-step oracle: explicit per-sub-token projection, then Xᵀ·G by loops
        let v = layer.projection().unwrap().v().to_vec();
        let mut xhat = x.data().to_vec();
        for sub in xhat.chunks_mut(3) {
            let c: f64 = sub.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (s, vi) in sub.iter_mut().zip(&v) {
                *s = c * vi;
            }
        }
        let gw = grads.grad_weight.unwrap();
        for i in 0..6 {
            for j in 0..4 {
                let s: f64 = (0..4).map(|r| xhat[r * 6 + i] * g.data()[r * 4 + j]).sum();
                assert!((gw.at(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_layer_stores_nothing_and_gets_no_grad() {
        let mut layer = DenseLayer::new("f", 4, 2, true, SavePolicy::None, DType::F64, 1).unwrap();
        let mut cache = BackwardCache::new();
        layer.forward(&randn(&[3, 4], 2), Some(&mut cache)).unwrap();
        assert_eq!(cache.stored_scalars(), 0);
        let grads = dense_backward(&layer, &randn(&[3, 2], 3), &cache).unwrap();
        assert!(grads.grad_weight.is_none() && grads.grad_bias.is_none());
        assert_eq!(grads.grad_in.shape(), &[3, 4]);
    }

    #[test]
    fn weight_gradient_factorisation_two_orders() {
        let mut layer = DenseLayer::new("v", 8, 2, false, velora(4), DType::F64, 3).unwrap();
        let x = randn(&[3, 2, 8], 8);
        let g = randn(&[3, 2, 2], 9);
        let mut cache = BackwardCache::new();
        layer.forward(&x, Some(&mut cache)).unwrap();
        let gw = dense_backward(&layer, &g, &cache).unwrap().grad_weight.unwrap();
        let pv = layer.projection().unwrap();
        let projected = project(&x.clone().reshape(vec![3, 4, 4]).unwrap(), pv)
            .unwrap()
            .reshape(vec![3, 2, 8])
            .unwrap();
        let mut full = DenseLayer::from_weights("v", layer.weight.value.clone(), None, SavePolicy::Full, 0).unwrap();
        let mut c2 = BackwardCache::new();
        full.forward(&projected, Some(&mut c2)).unwrap();
        let gw2 = dense_backward(&full, &g, &c2).unwrap().grad_weight.unwrap();
        for (a, b) in gw.data().iter().zip(gw2.data()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn update_rule_oracle_cases() {
        let w = randn(&[4, 3], 1);
        let x = randn(&[5, 4], 2);
        let g = randn(&[5, 3], 3);
        let pv = init_random("l", 4, 4).unwrap();
        assert_eq!(velora_update_rule_oracle(&w, &g, &x, pv.v(), 0.0).unwrap(), w);
        assert!(matches!(
            velora_update_rule_oracle(&w, &g, &x, &[1.0, 0.0], 0.1),
            Err(Error::Precondition(_))
        ));
        // every token orthogonal to v: no update at all
        let v = [1.0, 0.0, 0.0, 0.0];
        let mut xo = x.clone();
        for row in xo.data_mut().chunks_mut(4) {
            row[0] = 0.0;
        }
        let w2 = velora_update_rule_oracle(&w, &g, &xo, &v, 0.5).unwrap();
        assert_eq!(w2, w);
    }

    #[test]
    fn stale_projection_is_detected() {
        let cfg = VeloraConfig::new(2, InitStrategy::RunningAverage);
        let mut layer = DenseLayer::new("r", 4, 2, false, SavePolicy::Velora(cfg), DType::F64, 1).unwrap();
        let mut c1 = BackwardCache::new();
        layer.forward(&randn(&[2, 4], 1), Some(&mut c1)).unwrap();
        let mut c2 = BackwardCache::new();
        layer.forward(&randn(&[2, 4], 2), Some(&mut c2)).unwrap();
        assert!(dense_backward(&layer, &randn(&[2, 2], 3), &c1).is_err());
        assert!(dense_backward(&layer, &randn(&[2, 2], 3), &c2).is_ok());
    }
}
