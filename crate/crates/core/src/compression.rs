//! Sub-token grouping and rank-1 compression against a fixed unit vector.
//!
//! A token batch `Z[B, N, D]` is regrouped (a pure reshape) into
//! `z[B, N·D/M, M]`: sub-token `j` of token `t` is the contiguous depth slice
//! `[jM, (j+1)M)`. Each sub-token is then reduced to the single scalar `z·v`.
//! Reconstruction multiplies those scalars back onto `v`, so the composed map
//! `z ↦ (z·v)v` is the orthogonal projector onto `span(v)`.

use log::warn;

use crate::rng::SeededRng;
use crate::tensor::{dot, norm, normalize_in_place};
use crate::{Error, Result, Tensor};

/// Mean norms below this are treated as a degenerate first batch.
pub const DEGENERATE_MEAN_NORM: f64 = 1e-8;

/// Largest number of sub-tokens fed to the SVD initialiser.
pub const SVD_MAX_SUBTOKENS: usize = 4096;

pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitStrategy {
    Random,
    Svd,
    FixedAverage,
    RunningAverage,
}

impl InitStrategy {
    pub const ALL: [InitStrategy; 4] = [
        InitStrategy::Random,
        InitStrategy::Svd,
        InitStrategy::FixedAverage,
        InitStrategy::RunningAverage,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            InitStrategy::Random => "random",
            InitStrategy::Svd => "svd",
            InitStrategy::FixedAverage => "fixed_average",
            InitStrategy::RunningAverage => "running_average",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }
}

/// How the current `v` came about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Requested,
    /// The requested strategy saw a degenerate batch and a seeded random
    /// vector was used instead.
    FallbackRandom,
}

/// The unit vector `v` a compressed layer projects its sub-tokens onto.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionVector {
    layer_id: String,
    v: Vec<f64>,
    strategy: InitStrategy,
    frozen: bool,
    momentum: f64,
    accumulator: Vec<f64>,
    provenance: Provenance,
    generation: u64,
}

impl ProjectionVector {
    /// Reassembles a vector from stored fields, re-checking its invariants.
    pub fn from_parts(
        layer_id: String,
        strategy: InitStrategy,
        v: Vec<f64>,
        frozen: bool,
        momentum: f64,
        accumulator: Vec<f64>,
    ) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::Precondition("projection vector is empty".into()));
        }
        if (norm(&v) - 1.0).abs() > 1e-6 {
            return Err(Error::Precondition(format!(
                "projection vector for {layer_id} is not unit norm"
            )));
        }
        if !accumulator.is_empty() && accumulator.len() != v.len() {
            return Err(Error::Dimension {
                op: "projection accumulator",
                lhs: vec![accumulator.len()],
                rhs: vec![v.len()],
            });
        }
        if !(0.0..1.0).contains(&momentum) || accumulator.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition(format!(
                "invalid running-average state for {layer_id}"
            )));
        }
        Ok(Self {
            layer_id,
            v,
            strategy,
            frozen,
            momentum,
            accumulator,
            provenance: Provenance::Requested,
            generation: 0,
        })
    }

    /// Restores the bookkeeping [`from_parts`](Self::from_parts) resets.
    pub fn with_history(mut self, provenance: Provenance, generation: u64) -> Self {
        self.provenance = provenance;
        self.generation = generation;
        self
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Sub-token size `M`.
    pub fn m(&self) -> usize {
        self.v.len()
    }

    pub fn strategy(&self) -> InitStrategy {
        self.strategy
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Raw (unnormalised) running mean; empty for frozen strategies.
    pub fn accumulator(&self) -> &[f64] {
        &self.accumulator
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Bumped on every update, so stale compressed activations are detectable.
    pub fn generation(&self) -> u64 {
        self.generation
    }
}

/// Compressed sub-tokens `z_p` plus what is needed to ungroup them.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedActivation {
    z_p: Tensor,
    original_shape: [usize; 3],
    m: usize,
    layer_id: String,
    generation: u64,
}

impl CompressedActivation {
    /// `[B, N·D/M, 1]`.
    pub fn z_p(&self) -> &Tensor {
        &self.z_p
    }

    pub fn original_shape(&self) -> [usize; 3] {
        self.original_shape
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn stored_scalars(&self) -> usize {
        self.z_p.numel()
    }
}

fn subtoken_error(layer_id: &str, d: usize, m: usize) -> Error {
    Error::SubTokenSize {
        layer_id: layer_id.to_string(),
        d,
        m,
    }
}

/// Checks that `m` is a valid sub-token size for depth `d`.
pub fn check_subtoken_size(layer_id: &str, d: usize, m: usize) -> Result<()> {
    if m == 0 || d % m != 0 {
        return Err(subtoken_error(layer_id, d, m));
    }
    Ok(())
}

fn dims3(z: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match *z.shape() {
        [b, n, d] => Ok([b, n, d]),
        _ => Err(Error::Rank {
            op,
            min: 3,
            shape: z.shape().to_vec(),
        }),
    }
}

/// `[B, N, D] -> [B, N·D/M, M]` without touching the buffer.
pub fn group(z: Tensor, m: usize) -> Result<Tensor> {
    let [b, n, d] = dims3(&z, "group")?;
    check_subtoken_size("<ungrouped tensor>", d, m)?;
    z.reshape(vec![b, n * d / m, m])
}

/// Exact inverse of [`group`].
pub fn ungroup(z: Tensor, original_shape: [usize; 3]) -> Result<Tensor> {
    let [b, s, m] = dims3(&z, "ungroup")?;
    let [ob, on, od] = original_shape;
    if ob != b || od % m != 0 || on * (od / m) != s {
        return Err(Error::Dimension {
            op: "ungroup",
            lhs: z.shape().to_vec(),
            rhs: original_shape.to_vec(),
        });
    }
    z.reshape(original_shape.to_vec())
}

/// Views any activation `[B, .., D]` as `[B, N, D]`; rank 2 gives `N = 1`.
pub fn token_dims(x: &Tensor) -> Result<[usize; 3]> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Rank {
            op: "token view",
            min: 2,
            shape: shape.to_vec(),
        });
    }
    let d = shape[shape.len() - 1];
    Ok([shape[0], x.numel() / (shape[0] * d), d])
}

fn check_m(op: &'static str, got: usize, pv: &ProjectionVector) -> Result<()> {
    if got != pv.m() {
        return Err(Error::Dimension {
            op,
            lhs: vec![got],
            rhs: vec![pv.m()],
        });
    }
    Ok(())
}

fn compress_buffer(data: &[f64], pv: &ProjectionVector, dtype: crate::DType) -> Vec<f64> {
    data.chunks_exact(pv.m())
        .map(|s| dtype.round(dot(s, &pv.v)))
        .collect()
}

/// `z_p[b, s] = z[b, s, :]·v` for grouped sub-tokens `z[B, S, M]`.
///
/// The recorded original shape is `z`'s own, i.e. each sub-token is treated
/// as a token of depth `M`. Use [`compress_tokens`] to keep the token shape.
pub fn compress(z: &Tensor, pv: &ProjectionVector) -> Result<CompressedActivation> {
    let [b, s, m] = dims3(z, "compress")?;
    check_m("compress", m, pv)?;
    let data = compress_buffer(z.data(), pv, z.dtype());
    Ok(CompressedActivation {
        z_p: Tensor::from_parts(vec![b, s, 1], data, z.dtype()),
        original_shape: [b, s, m],
        m,
        layer_id: pv.layer_id.clone(),
        generation: pv.generation,
    })
}

/// `compress(group(x, M), v)` for token activations `x[B, N, D]`, read in
/// place. Other ranks go through [`token_dims`].
pub fn compress_tokens(x: &Tensor, pv: &ProjectionVector) -> Result<CompressedActivation> {
    let [b, n, d] = token_dims(x)?;
    check_subtoken_size(&pv.layer_id, d, pv.m())?;
    let data = compress_buffer(x.data(), pv, x.dtype());
    Ok(CompressedActivation {
        z_p: Tensor::from_parts(vec![b, n * d / pv.m(), 1], data, x.dtype()),
        original_shape: [b, n, d],
        m: pv.m(),
        layer_id: pv.layer_id.clone(),
        generation: pv.generation,
    })
}

/// `ẑ[b, s, :] = z_p[b, s]·v`, shaped `[B, S, M]`.
pub fn reconstruct(ca: &CompressedActivation, pv: &ProjectionVector) -> Result<Tensor> {
    check_m("reconstruct", ca.m, pv)?;
    let shape = ca.z_p.shape();
    let (b, s) = (shape[0], shape[1]);
    let dtype = ca.z_p.dtype();
    let mut out = Vec::with_capacity(b * s * ca.m);
    for &c in ca.z_p.data() {
        out.extend(pv.v.iter().map(|&vi| dtype.round(c * vi)));
    }
    Ok(Tensor::from_parts(vec![b, s, ca.m], out, dtype))
}

/// `ungroup(reconstruct(z_p, v))`, shaped like the original tokens.
pub fn reconstruct_tokens(ca: &CompressedActivation, pv: &ProjectionVector) -> Result<Tensor> {
    ungroup(reconstruct(ca, pv)?, ca.original_shape)
}

/// The rank-1 projector `z ↦ (z·v)v` applied to every sub-token.
pub fn project(z: &Tensor, pv: &ProjectionVector) -> Result<Tensor> {
    reconstruct(&compress(z, pv)?, pv)
}

/// Treats every length-`M` run of the buffer as one sub-token row.
fn subtoken_rows(t: &Tensor) -> (usize, usize) {
    let m = t.last_dim();
    (t.numel() / m, m)
}

fn mean_subtoken(t: &Tensor) -> Vec<f64> {
    let (rows, m) = subtoken_rows(t);
    let mut mean = vec![0.0; m];
    for row in t.data().chunks_exact(m) {
        for (acc, x) in mean.iter_mut().zip(row) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= rows as f64);
    mean
}

fn random_unit(m: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed, 0);
    loop {
        let mut v: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        if normalize_in_place(&mut v) > 0.0 {
            return v;
        }
    }
}

fn frozen(layer_id: &str, strategy: InitStrategy, v: Vec<f64>, provenance: Provenance) -> ProjectionVector {
    ProjectionVector {
        layer_id: layer_id.to_string(),
        v,
        strategy,
        frozen: true,
        momentum: DEFAULT_MOMENTUM,
        accumulator: Vec::new(),
        provenance,
        generation: 0,
    }
}

fn fallback(layer_id: &str, strategy: InitStrategy, m: usize, seed: u64, why: &str) -> ProjectionVector {
    warn!(
        "layer {layer_id}: {} initialisation saw {why}; falling back to a seeded random unit vector (seed {seed})",
        strategy.tag()
    );
    frozen(layer_id, strategy, random_unit(m, seed), Provenance::FallbackRandom)
}

/// Normalised isotropic Gaussian draw, frozen.
pub fn init_random(layer_id: &str, m: usize, seed: u64) -> Result<ProjectionVector> {
    if m == 0 {
        return Err(Error::Precondition("sub-token size must be >= 1".into()));
    }
    Ok(frozen(layer_id, InitStrategy::Random, random_unit(m, seed), Provenance::Requested))
}

/// `v = normalize(mean of every sub-token in the first batch)`, frozen.
///
/// `first_batch` may have any shape whose last axis is `M`. A near-zero
/// mean falls back to [`init_random`] with `fallback_seed`.
pub fn init_fixed_average(layer_id: &str, first_batch: &Tensor, fallback_seed: u64) -> Result<ProjectionVector> {
    let mut mean = mean_subtoken(first_batch);
    if norm(&mean) < DEGENERATE_MEAN_NORM {
        return Ok(fallback(
            layer_id,
            InitStrategy::FixedAverage,
            mean.len(),
            fallback_seed,
            "a near-zero sub-token mean",
        ));
    }
    normalize_in_place(&mut mean);
    Ok(frozen(layer_id, InitStrategy::FixedAverage, mean, Provenance::Requested))
}

/// Top right-singular vector of the sub-token matrix, by power iteration on
/// its `M×M` Gram matrix. At most [`SVD_MAX_SUBTOKENS`] rows are used, drawn
/// without replacement from `seed`. The sign is fixed so the
/// largest-magnitude component is positive.
pub fn init_svd(layer_id: &str, first_batch: &Tensor, iters: usize, seed: u64) -> Result<ProjectionVector> {
    if iters == 0 {
        return Err(Error::Precondition("svd initialisation needs iters >= 1".into()));
    }
    let (rows, m) = subtoken_rows(first_batch);
    let data = first_batch.data();
    let mut rng = SeededRng::new(seed, 1);
    let mut picked: Vec<usize> = (0..rows).collect();
    if rows > SVD_MAX_SUBTOKENS {
        // partial Fisher-Yates: the first SVD_MAX_SUBTOKENS slots are a uniform sample
        for i in 0..SVD_MAX_SUBTOKENS {
            let j = i + rng.below(rows - i);
            picked.swap(i, j);
        }
        picked.truncate(SVD_MAX_SUBTOKENS);
        picked.sort_unstable();
    }

    let mut gram = vec![0.0; m * m];
    for &r in &picked {
        let row = &data[r * m..(r + 1) * m];
        for i in 0..m {
            for j in 0..m {
                gram[i * m + j] += row[i] * row[j];
            }
        }
    }
    if gram.iter().all(|&g| g == 0.0) {
        return Ok(fallback(layer_id, InitStrategy::Svd, m, seed, "an all-zero batch"));
    }

    let mut v: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
    normalize_in_place(&mut v);
    let mut next = vec![0.0; m];
    for _ in 0..iters {
        for i in 0..m {
            next[i] = dot(&gram[i * m..(i + 1) * m], &v);
        }
        if normalize_in_place(&mut next) == 0.0 {
            // start vector orthogonal to the range; restart on the heaviest axis
            let heaviest = (0..m).max_by(|&a, &b| gram[a * m + a].total_cmp(&gram[b * m + b])).unwrap_or(0);
            v.iter_mut().for_each(|x| *x = 0.0);
            v[heaviest] = 1.0;
            continue;
        }
        std::mem::swap(&mut v, &mut next);
    }
    let pivot = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(frozen(layer_id, InitStrategy::Svd, v, Provenance::Requested))
}

/// A running-average vector before its first update. `v` starts as a seeded
/// random unit vector and is replaced by the first batch mean.
pub fn init_running_average(layer_id: &str, m: usize, momentum: f64, seed: u64) -> Result<ProjectionVector> {
    if m == 0 {
        return Err(Error::Precondition("sub-token size must be >= 1".into()));
    }
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(Error::Domain(format!("momentum {momentum} must lie in (0, 1)")));
    }
    Ok(ProjectionVector {
        layer_id: layer_id.to_string(),
        v: random_unit(m, seed),
        strategy: InitStrategy::RunningAverage,
        frozen: false,
        momentum,
        accumulator: vec![0.0; m],
        provenance: Provenance::Requested,
        generation: 0,
    })
}

/// `acc ← momentum·acc + (1 − momentum)·batch_mean`, then `v = normalize(acc)`.
///
/// The accumulator stays unnormalised. If it is still near zero the previous
/// `v` is kept.
pub fn update_running_average(pv: &mut ProjectionVector, batch: &Tensor) -> Result<()> {
    if pv.frozen || pv.strategy != InitStrategy::RunningAverage {
        return Err(Error::State(format!(
            "layer {}: running-average update on a frozen {} vector",
            pv.layer_id,
            pv.strategy.tag()
        )));
    }
    check_m("update_running_average", batch.last_dim(), pv)?;
    let mean = mean_subtoken(batch);
    let keep = pv.momentum;
    for (acc, x) in pv.accumulator.iter_mut().zip(&mean) {
        *acc = keep * *acc + (1.0 - keep) * x;
    }
    let mut v = pv.accumulator.clone();
    if normalize_in_place(&mut v) >= DEGENERATE_MEAN_NORM {
        pv.v = v;
        pv.provenance = Provenance::Requested;
    } else if pv.provenance != Provenance::FallbackRandom {
        warn!(
            "layer {}: running_average initialisation saw a near-zero sub-token mean; falling back to the seeded random unit vector",
            pv.layer_id
        );
        pv.provenance = Provenance::FallbackRandom;
    }
    pv.generation += 1;
    Ok(())
}

/// Builds the vector for `strategy` from a layer's first batch.
pub fn initialise(
    layer_id: &str,
    strategy: InitStrategy,
    first_batch: &Tensor,
    momentum: f64,
    svd_iters: usize,
    seed: u64,
) -> Result<ProjectionVector> {
    let m = first_batch.last_dim();
    match strategy {
        InitStrategy::Random => init_random(layer_id, m, seed),
        InitStrategy::Svd => init_svd(layer_id, first_batch, svd_iters, seed),
        InitStrategy::FixedAverage => init_fixed_average(layer_id, first_batch, seed),
        InitStrategy::RunningAverage => {
            let mut pv = init_running_average(layer_id, m, momentum, seed)?;
            update_running_average(&mut pv, first_batch)?;
            Ok(pv)
        }
    }
}
