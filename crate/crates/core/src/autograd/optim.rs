//! SGD and AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::autograd::Param;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    moments: BTreeMap<String, AdamMoments>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    /// Restores counters and moments, e.g. from a checkpoint.
    pub fn with_state(kind: OptimizerKind, step: u64, moments: BTreeMap<String, AdamMoments>) -> Self {
        Self { kind, moments, step }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, AdamMoments> {
        &self.moments
    }

    /// Applies one update to every trainable parameter, then clears all
    /// gradients.
    pub fn step(&mut self, mut params: Vec<&mut Param>) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd { lr } => sgd_step(&mut params, lr)?,
            OptimizerKind::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => adamw_step(&mut params, &mut self.moments, self.step + 1, lr, beta1, beta2, eps, weight_decay)?,
        }
        self.step += 1;
        Ok(())
    }
}

fn check_grads(params: &[&mut Param]) -> Result<()> {
    for p in params.iter().filter(|p| !p.frozen) {
        match &p.grad {
            None => return Err(Error::State(format!("parameter {} has no gradient", p.name))),
            Some(g) if g.shape() != p.value.shape() => {
                return Err(Error::Dimension {
                    op: "optimizer step",
                    lhs: g.shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// `θ ← θ − lr·g` for every trainable parameter.
pub fn sgd_step(params: &mut [&mut Param], lr: f64) -> Result<()> {
    check_grads(params)?;
    for p in params.iter_mut() {
        if !p.frozen {
            let grad = p.grad.take().expect("checked");
            let dtype = p.dtype();
            for (w, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                *w = dtype.round(*w - lr * g);
            }
        }
        p.zero_grad();
    }
    Ok(())
}

/// One AdamW update at step `t` (1-based), decay applied to the weights
/// directly: `θ ← θ(1 − lr·λ) − lr·m̂/(√v̂ + ε)`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut [&mut Param],
    moments: &mut BTreeMap<String, AdamMoments>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    check_grads(params)?;
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for p in params.iter_mut() {
        if p.frozen {
            p.zero_grad();
            continue;
        }
        let grad = p.grad.take().expect("checked");
        let n = p.value.numel();
        let mom = moments.entry(p.name.clone()).or_insert_with(|| AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        if mom.m.len() != n || mom.v.len() != n {
            return Err(Error::State(format!("optimizer moments for {} have the wrong size", p.name)));
        }
        let dtype = p.dtype();
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(&mut mom.m).zip(&mut mom.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            let decayed = *w * (1.0 - lr * weight_decay);
            *w = dtype.round(decayed - lr * m_hat / (v_hat.sqrt() + eps));
        }
    }
    Ok(())
}
