//! Central finite-difference checks for every layer type.
//!
//! Each case builds a small randomly shaped instance, takes the scalar loss
//! `L = Σ out ⊙ R` for a fixed random `R` (so `grad_out = R`), and compares
//! the hand-written backward against `(L(θ+h) − L(θ−h)) / 2h` for every
//! parameter entry and every input entry.
//!
//! A velora layer's weight gradient is by construction the gradient of the
//! surrogate loss in which the input is replaced by its per-sub-token
//! projection onto `v`; its weight and bias entries are checked against
//! that surrogate, its input gradient against the true loss.

use std::fmt;

use crate::autograd::{
    cross_entropy_loss, mse_loss, AttentionBlock, AttentionPolicies, BackwardCache, CharTransformer, DenseLayer,
    Embedding, LoraDenseLayer, MlpBlock, Param, SavePolicy, Sequential, StackLayer, TransformerPolicies, VeloraConfig,
};
use crate::compression::InitStrategy;
use crate::rng::SeededRng;
use crate::tensor::{dot, Distribution};
use crate::{DType, Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub seeds: u64,
    pub step: f64,
    pub rel_tol: f64,
    /// Floor for entries whose true gradient is near zero, where the
    /// relative error is dominated by cancellation in the difference.
    pub abs_tol: f64,
    /// Upper bounds on `(B, N, D)`.
    pub max_shape: [usize; 3],
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seeds: 50,
            step: 1e-6,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            max_shape: [4, 3, 8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GradCase {
    DenseFull,
    DenseVelora,
    DenseNone,
    Lora,
    Sequential,
    Mlp,
    Attention,
    Embedding,
    Transformer,
    MseLoss,
    CrossEntropyLoss,
}

impl GradCase {
    pub const ALL: [GradCase; 11] = [
        GradCase::DenseFull,
        GradCase::DenseVelora,
        GradCase::DenseNone,
        GradCase::Lora,
        GradCase::Sequential,
        GradCase::Mlp,
        GradCase::Attention,
        GradCase::Embedding,
        GradCase::Transformer,
        GradCase::MseLoss,
        GradCase::CrossEntropyLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradCase::DenseFull => "dense_full",
            GradCase::DenseVelora => "dense_velora",
            GradCase::DenseNone => "dense_none",
            GradCase::Lora => "lora",
            GradCase::Sequential => "sequential",
            GradCase::Mlp => "mlp_block",
            GradCase::Attention => "attention_block",
            GradCase::Embedding => "embedding",
            GradCase::Transformer => "transformer",
            GradCase::MseLoss => "mse_loss",
            GradCase::CrossEntropyLoss => "cross_entropy_loss",
        }
    }
}

impl fmt::Display for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of one case at one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutcome {
    pub case: GradCase,
    pub seed: u64,
    pub shape: [usize; 3],
    pub entries_checked: usize,
    /// Largest `|a − n| / (rel_tol·max(|a|, |n|) + abs_tol)`; passes at ≤ 1.
    pub worst_score: f64,
    pub worst_rel_err: f64,
    pub worst_at: String,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.worst_score <= 1.0 && self.entries_checked > 0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub outcomes: Vec<CaseOutcome>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.outcomes.is_empty() && self.outcomes.iter().all(CaseOutcome::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseOutcome> {
        self.outcomes.iter().filter(|o| !o.passed())
    }

    pub fn entries_checked(&self) -> usize {
        self.outcomes.iter().map(|o| o.entries_checked).sum()
    }

    /// Per case: seeds run, seeds passed, worst score.
    pub fn summary(&self) -> Vec<(GradCase, usize, usize, f64)> {
        GradCase::ALL
            .iter()
            .filter_map(|&case| {
                let rows: Vec<_> = self.outcomes.iter().filter(|o| o.case == case).collect();
                if rows.is_empty() {
                    return None;
                }
                let passed = rows.iter().filter(|o| o.passed()).count();
                let worst = rows.iter().map(|o| o.worst_score).fold(0.0, f64::max);
                Some((case, rows.len(), passed, worst))
            })
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (case, n, ok, worst) in self.summary() {
            let status = if ok == n { "ok" } else { "FAIL" };
            writeln!(f, "{:<20} {ok:>3}/{n:<3} worst score {worst:.3e}  {status}", case.name())?;
        }
        for o in self.failures() {
            writeln!(
                f,
                "  failed: {} seed {} shape {:?} at {} (rel err {:.3e})",
                o.case, o.seed, o.shape, o.worst_at, o.worst_rel_err
            )?;
        }
        Ok(())
    }
}

/// Runs every case for seeds `0..cfg.seeds`.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut outcomes = Vec::new();
    for case in GradCase::ALL {
        for seed in 0..cfg.seeds {
            outcomes.push(check_case(case, seed, cfg)?);
        }
    }
    Ok(GradCheckReport { outcomes })
}

struct Checker<'a> {
    cfg: &'a GradCheckConfig,
    checked: usize,
    worst_score: f64,
    worst_rel_err: f64,
    worst_at: String,
}

impl<'a> Checker<'a> {
    fn new(cfg: &'a GradCheckConfig) -> Self {
        Self {
            cfg,
            checked: 0,
            worst_score: 0.0,
            worst_rel_err: 0.0,
            worst_at: String::new(),
        }
    }

    fn compare(&mut self, what: &str, analytic: &[f64], numeric: &[f64]) {
        if analytic.len() != numeric.len() {
            self.fail(format!("{what}: length {} vs {}", analytic.len(), numeric.len()));
            return;
        }
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let err = (a - n).abs();
            let scale = a.abs().max(n.abs());
            let score = err / (self.cfg.rel_tol * scale + self.cfg.abs_tol);
            self.checked += 1;
            if !(score <= self.worst_score) {
                self.worst_score = if score.is_nan() { f64::INFINITY } else { score };
                self.worst_rel_err = if scale > 0.0 { err / scale } else { 0.0 };
                self.worst_at = format!("{what}[{i}]");
            }
        }
    }

    fn fail(&mut self, why: String) {
        self.worst_score = f64::INFINITY;
        self.worst_at = why;
    }

    fn finish(self, case: GradCase, seed: u64, shape: [usize; 3]) -> CaseOutcome {
        CaseOutcome {
            case,
            seed,
            shape,
            entries_checked: self.checked,
            worst_score: self.worst_score,
            worst_rel_err: self.worst_rel_err,
            worst_at: self.worst_at,
        }
    }
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> Result<Tensor> {
    Tensor::sample(shape, Distribution::Normal { mean: 0.0, std: 1.0 }, rng)
}

fn weighted_sum(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn divisors(d: usize) -> Vec<usize> {
    (1..=d).filter(|m| d % m == 0).collect()
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_input_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Compares the gradient stored on every trainable parameter with central
/// differences of `loss`. Frozen parameters must carry no gradient.
fn check_params<M>(
    checker: &mut Checker<'_>,
    model: &mut M,
    params: impl Fn(&mut M) -> Vec<&mut Param>,
    loss: impl Fn(&mut M) -> Result<f64>,
) -> Result<()> {
    let h = checker.cfg.step;
    let count = params(model).len();
    for pi in 0..count {
        let (name, frozen, analytic, n) = {
            let ps = params(model);
            let p = &ps[pi];
            (p.name.clone(), p.frozen, p.grad.clone(), p.value.numel())
        };
        if frozen {
            if analytic.is_some() {
                checker.fail(format!("frozen parameter {name} received a gradient"));
            }
            continue;
        }
        let Some(analytic) = analytic else {
            checker.fail(format!("parameter {name} has no gradient"));
            continue;
        };
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let orig = params(model)[pi].value.data()[j];
            params(model)[pi].value.data_mut()[j] = orig + h;
            let up = loss(model)?;
            params(model)[pi].value.data_mut()[j] = orig - h;
            let down = loss(model)?;
            params(model)[pi].value.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        checker.compare(&name, analytic.data(), &numeric);
    }
    Ok(())
}

/// Replaces every length-`v.len()` run of `x` with `(run·v)v`.
fn project_runs(x: &Tensor, v: &[f64]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(x.numel());
    for run in x.data().chunks_exact(v.len()) {
        let c = dot(run, v);
        data.extend(v.iter().map(|vi| c * vi));
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn random_shape(cfg: &GradCheckConfig, rng: &mut SeededRng) -> [usize; 3] {
    let [b, n, d] = cfg.max_shape;
    [1 + rng.below(b), 1 + rng.below(n), 1 + rng.below(d)]
}

/// Runs one case at one seed.
pub fn check_case(case: GradCase, seed: u64, cfg: &GradCheckConfig) -> Result<CaseOutcome> {
    let mut rng = SeededRng::new(seed, 0x6c ^ case as u64);
    let shape = random_shape(cfg, &mut rng);
    let [b, n, d] = shape;
    let mut checker = Checker::new(cfg);
    let h = cfg.step;
    let f64_ = DType::F64;

    match case {
        GradCase::DenseFull | GradCase::DenseNone | GradCase::DenseVelora => {
            let d_out = 1 + rng.below(cfg.max_shape[2]);
            let policy = match case {
                GradCase::DenseFull => SavePolicy::Full,
                GradCase::DenseNone => SavePolicy::None,
                _ => {
                    let ms = divisors(d);
                    let m = ms[rng.below(ms.len())];
                    let init = InitStrategy::ALL[rng.below(InitStrategy::ALL.len())];
                    SavePolicy::Velora(VeloraConfig::new(m, init))
                }
            };
            let mut layer = DenseLayer::new("dense", d, d_out, true, policy, f64_, seed)?;
            if let Some(bias) = layer.bias.as_mut() {
                bias.value = randn(&[d_out], &mut rng)?;
            }
            let x = randn(&[b, n, d], &mut rng)?;
            let r = randn(&[b, n, d_out], &mut rng)?;
            let mut cache = BackwardCache::new();
            layer.forward(&x, Some(&mut cache))?;
            let grad_in = layer.backward(&r, &cache)?;

            let numeric = numeric_input_grad(&x, h, |xp| Ok(weighted_sum(&layer.clone().forward(xp, None)?, &r)))?;
            checker.compare("input", grad_in.data(), &numeric);

            let x_seen = match layer.projection() {
                Some(pv) => project_runs(&x, pv.v())?,
                None => x.clone(),
            };
            check_params(
                &mut checker,
                &mut layer,
                |l| l.params_mut(),
                |l| Ok(weighted_sum(&l.forward(&x_seen, None)?, &r)),
            )?;
        }
        GradCase::Lora => {
            let d_out = 1 + rng.below(cfg.max_shape[2]);
            let rank = 1 + rng.below(d);
            let a_policy = if seed % 2 == 0 { SavePolicy::Full } else { SavePolicy::None };
            let alpha = 0.5 + rng.uniform(0.0, 1.5);
            let mut layer = LoraDenseLayer::new("lora", d, d_out, rank, alpha, a_policy, SavePolicy::Full, f64_, seed)?;
            // a nonzero adapter so both paths carry signal
            layer.b.weight.value = randn(&[rank, d_out], &mut rng)?;
            let x = randn(&[b, n, d], &mut rng)?;
            let r = randn(&[b, n, d_out], &mut rng)?;
            let mut cache = BackwardCache::new();
            layer.forward(&x, Some(&mut cache))?;
            let grad_in = layer.backward(&r, &cache)?;
            let numeric = numeric_input_grad(&x, h, |xp| Ok(weighted_sum(&layer.clone().forward(xp, None)?, &r)))?;
            checker.compare("input", grad_in.data(), &numeric);
            check_params(&mut checker, &mut layer, |l| l.params_mut(), |l| Ok(weighted_sum(&l.forward(&x, None)?, &r)))?;
        }
        GradCase::Sequential => {
            let hidden = 1 + rng.below(cfg.max_shape[2]);
            let d_out = 1 + rng.below(cfg.max_shape[2]);
            let mut net = Sequential::new(vec![
                StackLayer::Dense(DenseLayer::new("l0", d, hidden, true, SavePolicy::Full, f64_, seed)?),
                StackLayer::Dense(DenseLayer::new("l1", hidden, d_out, true, SavePolicy::Full, f64_, seed + 1)?),
            ])?;
            let x = randn(&[b, n, d], &mut rng)?;
            let r = randn(&[b, n, d_out], &mut rng)?;
            let mut cache = BackwardCache::new();
            net.forward(&x, Some(&mut cache))?;
            let grad_in = net.backward(&r, &cache)?;
            let numeric = numeric_input_grad(&x, h, |xp| Ok(weighted_sum(&net.clone().forward(xp, None)?, &r)))?;
            checker.compare("input", grad_in.data(), &numeric);
            check_params(
                &mut checker,
                &mut net,
                |s| s.dense_layers_mut().into_iter().flat_map(|l| l.params_mut()).collect(),
                |s| Ok(weighted_sum(&s.forward(&x, None)?, &r)),
            )?;
        }
        GradCase::Mlp => {
            let hidden = 1 + rng.below(2 * cfg.max_shape[2]);
            let mut block = MlpBlock::new("mlp", d, hidden, SavePolicy::Full, SavePolicy::Full, f64_, seed)?;
            for l in block.dense_layers_mut() {
                if let Some(bias) = l.bias.as_mut() {
                    bias.value = randn(bias.value.shape(), &mut rng)?.scale(0.5);
                }
            }
            let x = randn(&[b, n, d], &mut rng)?;
            let r = randn(&[b, n, d], &mut rng)?;
            let mut cache = BackwardCache::new();
            block.forward(&x, Some(&mut cache))?;
            let grad_in = block.backward(&r, &cache)?;
            let numeric = numeric_input_grad(&x, h, |xp| Ok(weighted_sum(&block.clone().forward(xp, None)?, &r)))?;
            checker.compare("input", grad_in.data(), &numeric);
            check_params(&mut checker, &mut block, |m| m.params_mut(), |m| Ok(weighted_sum(&m.forward(&x, None)?, &r)))?;
        }
        GradCase::Attention => {
            let causal = seed % 2 == 1;
            let mut block = AttentionBlock::new("attn", d, AttentionPolicies::default(), causal, f64_, seed)?;
            let x = randn(&[b, n, d], &mut rng)?;
            let r = randn(&[b, n, d], &mut rng)?;
            let mut cache = BackwardCache::new();
            block.forward(&x, Some(&mut cache))?;
            let grad_in = block.backward(&r, &cache)?;
            let numeric = numeric_input_grad(&x, h, |xp| Ok(weighted_sum(&block.clone().forward(xp, None)?, &r)))?;
            checker.compare("input", grad_in.data(), &numeric);
            check_params(&mut checker, &mut block, |a| a.params_mut(), |a| Ok(weighted_sum(&a.forward(&x, None)?, &r)))?;
        }
        GradCase::Embedding => {
            let vocab = 1 + rng.below(6);
            let mut emb = Embedding::new("emb", vocab, d, 1.0, f64_, seed)?;
            let ids: Vec<usize> = (0..b * n).map(|_| rng.below(vocab)).collect();
            let r = randn(&[b, n, d], &mut rng)?;
            let mut cache = BackwardCache::new();
            emb.forward(&ids, b, n, Some(&mut cache))?;
            emb.backward(&r, &cache)?;
            check_params(
                &mut checker,
                &mut emb,
                |e| vec![&mut e.table],
                |e| Ok(weighted_sum(&e.forward(&ids, b, n, None)?, &r)),
            )?;
        }
        GradCase::Transformer => {
            let vocab = 2 + rng.below(5);
            let d_ff = 1 + rng.below(2 * cfg.max_shape[2]);
            let mut model = CharTransformer::new(vocab, n, d, d_ff, 1, TransformerPolicies::default(), f64_, seed)?;
            let ids: Vec<usize> = (0..b * n).map(|_| rng.below(vocab)).collect();
            let targets: Vec<usize> = (0..b * n).map(|_| rng.below(vocab)).collect();
            let loss_of = |m: &mut CharTransformer| -> Result<f64> {
                let logits = m.forward(&ids, b, n, None)?;
                Ok(cross_entropy_loss(&logits, &targets)?.0)
            };
            let mut cache = BackwardCache::new();
            let logits = model.forward(&ids, b, n, Some(&mut cache))?;
            let (_, g) = cross_entropy_loss(&logits, &targets)?;
            model.backward(&g, &cache)?;
            check_params(&mut checker, &mut model, transformer_params, loss_of)?;
        }
        GradCase::MseLoss => {
            let pred = randn(&[b, n, d], &mut rng)?;
            let target = randn(&[b, n, d], &mut rng)?;
            let (_, g) = mse_loss(&pred, &target)?;
            let numeric = numeric_input_grad(&pred, h, |p| Ok(mse_loss(p, &target)?.0))?;
            checker.compare("pred", g.data(), &numeric);
        }
        GradCase::CrossEntropyLoss => {
            let classes = 1 + d;
            let logits = randn(&[b, n, classes], &mut rng)?.scale(2.0);
            let targets: Vec<usize> = (0..b * n).map(|_| rng.below(classes)).collect();
            let (_, g) = cross_entropy_loss(&logits, &targets)?;
            let numeric = numeric_input_grad(&logits, h, |l| Ok(cross_entropy_loss(l, &targets)?.0))?;
            checker.compare("logits", g.data(), &numeric);
        }
    }
    if checker.checked == 0 && checker.worst_at.is_empty() {
        return Err(Error::State(format!("gradient check {case} compared nothing")));
    }
    Ok(checker.finish(case, seed, shape))
}

fn transformer_params(m: &mut CharTransformer) -> Vec<&mut Param> {
    let CharTransformer {
        tokens,
        positions,
        blocks,
        head,
    } = m;
    let mut out = vec![&mut tokens.table, positions];
    out.extend(blocks.iter_mut().flat_map(|b| b.dense_layers_mut()).flat_map(|l| l.params_mut()));
    out.extend(head.params_mut());
    out
}
