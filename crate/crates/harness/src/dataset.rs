//! Seeded toy datasets.
//!
//! Generation depends only on the dataset spec, so two runs with equal specs
//! see identical data. Epoch order comes from its own rng stream per epoch.

use velora_core::rng::SeededRng;
use velora_core::{DType, Tensor};

use crate::config::{DatasetKind, DatasetSpec, BUILTIN_CORPUS};

const BUILTIN_TEXT: &str = include_str!("../data/alice.txt");

/// Hidden width of the teacher network behind `synthetic_regression`.
pub const TEACHER_HIDDEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read corpus {path}: {source}")]
    Corpus {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset too small: {0}")]
    TooSmall(String),
    #[error(transparent)]
    Tensor(#[from] velora_core::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Real(Tensor),
    Classes(Vec<usize>),
}

/// One step's worth of data.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Vector { x: Tensor, targets: Targets },
    /// `ids` and `targets` are `[batch, len]` flattened; targets are the
    /// ids shifted by one position.
    Tokens { ids: Vec<usize>, targets: Vec<usize>, batch: usize, len: usize },
}

impl Batch {
    pub fn size(&self) -> usize {
        match self {
            Batch::Vector { x, .. } => x.shape()[0],
            Batch::Tokens { batch, .. } => *batch,
        }
    }

    /// Leading activation shape every dense layer sees for this batch.
    pub fn leading(&self) -> Vec<usize> {
        match self {
            Batch::Vector { x, .. } => vec![x.shape()[0]],
            Batch::Tokens { batch, len, .. } => vec![*batch, *len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct VectorSplit {
    x: Vec<f64>,
    y: Targets,
    rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Data {
    Vector {
        d_in: usize,
        d_out: usize,
        train: VectorSplit,
        eval: VectorSplit,
    },
    Text {
        vocab: Vec<u8>,
        context: usize,
        train: Vec<usize>,
        eval: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    data: Data,
    seed: u64,
    dtype: DType,
}

impl Dataset {
    /// Builds the data described by a defaulted spec.
    pub fn generate(spec: &DatasetSpec, dtype: DType) -> Result<Self, DatasetError> {
        let seed = spec.seed.unwrap_or(0);
        let data = match spec.kind {
            DatasetKind::SyntheticRegression => {
                let (n, d_in, d_out) = (spec.n.unwrap_or(2048), spec.d_in.unwrap_or(64), spec.d_out.unwrap_or(1));
                let (x, y) = teacher_regression(n, d_in, d_out, spec.noise.unwrap_or(0.1), seed);
                let (train, eval) = split_vectors(x, Targets::Real(Tensor::new(vec![n, d_out], y)?), n, d_in, d_out, spec.train_fraction)?;
                Data::Vector { d_in, d_out, train, eval }
            }
            DatasetKind::SyntheticClassification => {
                let (n, d, k) = (spec.n.unwrap_or(2048), spec.d_in.unwrap_or(32), spec.classes.unwrap_or(4));
                let (x, y) = class_clusters(n, d, k, spec.noise.unwrap_or(1.0), seed);
                let (train, eval) = split_vectors(x, Targets::Classes(y), n, d, k, spec.train_fraction)?;
                Data::Vector { d_in: d, d_out: k, train, eval }
            }
            DatasetKind::CharLm => {
                let corpus = spec.corpus.as_deref().unwrap_or(BUILTIN_CORPUS);
                let mut bytes = if corpus == BUILTIN_CORPUS {
                    BUILTIN_TEXT.as_bytes().to_vec()
                } else {
                    std::fs::read(corpus).map_err(|source| DatasetError::Corpus {
                        path: corpus.to_string(),
                        source,
                    })?
                };
                if let Some(max) = spec.max_bytes {
                    bytes.truncate(max);
                }
                let context = spec.context.unwrap_or(64);
                let mut vocab = bytes.clone();
                vocab.sort_unstable();
                vocab.dedup();
                let ids: Vec<usize> = bytes.iter().map(|b| vocab.binary_search(b).unwrap()).collect();
                let cut = (ids.len() as f64 * spec.train_fraction).round() as usize;
                let (train, eval) = (ids[..cut].to_vec(), ids[cut..].to_vec());
                for (name, part) in [("train", &train), ("eval", &eval)] {
                    if part.len() < context + 1 {
                        return Err(DatasetError::TooSmall(format!(
                            "{name} split has {} bytes, a window needs {}",
                            part.len(),
                            context + 1
                        )));
                    }
                }
                Data::Text { vocab, context, train, eval }
            }
        };
        Ok(Self { data, seed, dtype })
    }

    /// Width of the model input (vector data) or vocabulary size (text).
    pub fn input_width(&self) -> usize {
        match &self.data {
            Data::Vector { d_in, .. } => *d_in,
            Data::Text { vocab, .. } => vocab.len(),
        }
    }

    /// Regression outputs or class count; vocabulary size for text.
    pub fn output_width(&self) -> usize {
        match &self.data {
            Data::Vector { d_out, .. } => *d_out,
            Data::Text { vocab, .. } => vocab.len(),
        }
    }

    pub fn vocab(&self) -> Option<&[u8]> {
        match &self.data {
            Data::Text { vocab, .. } => Some(vocab),
            Data::Vector { .. } => None,
        }
    }

    /// Training examples (rows or context windows).
    pub fn train_len(&self) -> usize {
        match &self.data {
            Data::Vector { train, .. } => train.rows,
            Data::Text { train, context, .. } => windows(train.len(), *context),
        }
    }

    pub fn eval_len(&self) -> usize {
        match &self.data {
            Data::Vector { eval, .. } => eval.rows,
            Data::Text { eval, context, .. } => windows(eval.len(), *context),
        }
    }

    /// Shuffled training batches for one epoch.
    pub fn train_batches(&self, epoch: usize, batch_size: usize) -> Result<Vec<Batch>, DatasetError> {
        let mut order: Vec<usize> = (0..self.train_len()).collect();
        SeededRng::new(self.seed, 1 + epoch as u64).shuffle(&mut order);
        order.chunks(batch_size).map(|idx| self.batch(true, idx)).collect()
    }

    /// Evaluation batches in storage order.
    pub fn eval_batches(&self, batch_size: usize) -> Result<Vec<Batch>, DatasetError> {
        let order: Vec<usize> = (0..self.eval_len()).collect();
        order.chunks(batch_size).map(|idx| self.batch(false, idx)).collect()
    }

    /// The first `n` evaluation examples as one batch.
    pub fn eval_probe(&self, n: usize) -> Result<Batch, DatasetError> {
        let idx: Vec<usize> = (0..n.min(self.eval_len())).collect();
        self.batch(false, &idx)
    }

    /// Every training example in storage order, as one batch.
    pub fn full_train_batch(&self) -> Result<Batch, DatasetError> {
        let idx: Vec<usize> = (0..self.train_len()).collect();
        self.batch(true, &idx)
    }

    fn batch(&self, train_split: bool, idx: &[usize]) -> Result<Batch, DatasetError> {
        match &self.data {
            Data::Vector { d_in, d_out, train, eval } => {
                let split = if train_split { train } else { eval };
                let x: Vec<f64> = idx.iter().flat_map(|&i| split.x[i * d_in..(i + 1) * d_in].iter().copied()).collect();
                let x = Tensor::new(vec![idx.len(), *d_in], x)?.to_dtype(self.dtype);
                let targets = match &split.y {
                    Targets::Real(y) => {
                        let rows: Vec<f64> = idx.iter().flat_map(|&i| y.data()[i * d_out..(i + 1) * d_out].iter().copied()).collect();
                        Targets::Real(Tensor::new(vec![idx.len(), *d_out], rows)?.to_dtype(self.dtype))
                    }
                    Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
                };
                Ok(Batch::Vector { x, targets })
            }
            Data::Text { context, train, eval, .. } => {
                let stream = if train_split { train } else { eval };
                let mut ids = Vec::with_capacity(idx.len() * context);
                let mut targets = Vec::with_capacity(idx.len() * context);
                for &w in idx {
                    let start = w * context;
                    ids.extend_from_slice(&stream[start..start + context]);
                    targets.extend_from_slice(&stream[start + 1..start + context + 1]);
                }
                Ok(Batch::Tokens {
                    ids,
                    targets,
                    batch: idx.len(),
                    len: *context,
                })
            }
        }
    }
}

/// Non-overlapping windows of `context + 1` tokens, sharing their last token
/// with the next window's first.
fn windows(len: usize, context: usize) -> usize {
    (len - 1) / context
}

/// `y = tanh(x·W1)·W2 + noise·ε` with a fixed random teacher.
fn teacher_regression(n: usize, d_in: usize, d_out: usize, noise: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = SeededRng::new(seed, 0);
    let h = TEACHER_HIDDEN;
    let w1: Vec<f64> = (0..d_in * h).map(|_| rng.normal() / (d_in as f64).sqrt()).collect();
    let w2: Vec<f64> = (0..h * d_out).map(|_| rng.normal() / (h as f64).sqrt()).collect();
    let mut x = Vec::with_capacity(n * d_in);
    let mut y = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        let row: Vec<f64> = (0..d_in).map(|_| rng.normal()).collect();
        let hidden: Vec<f64> = (0..h)
            .map(|j| row.iter().enumerate().map(|(i, xi)| xi * w1[i * h + j]).sum::<f64>().tanh())
            .collect();
        for o in 0..d_out {
            let clean: f64 = hidden.iter().enumerate().map(|(j, hj)| hj * w2[j * d_out + o]).sum();
            y.push(clean + noise * rng.normal());
        }
        x.extend(row);
    }
    (x, y)
}

/// Gaussian clusters around random class centres.
fn class_clusters(n: usize, d: usize, classes: usize, noise: f64, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = SeededRng::new(seed, 0);
    let centres: Vec<f64> = (0..classes * d).map(|_| rng.normal()).collect();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.below(classes);
        x.extend((0..d).map(|i| centres[c * d + i] + noise * rng.normal()));
        y.push(c);
    }
    (x, y)
}

fn split_vectors(
    x: Vec<f64>,
    y: Targets,
    n: usize,
    d_in: usize,
    d_out: usize,
    fraction: f64,
) -> Result<(VectorSplit, VectorSplit), DatasetError> {
    let cut = (n as f64 * fraction).round() as usize;
    if cut == 0 || cut == n {
        return Err(DatasetError::TooSmall(format!("n={n} leaves an empty split at fraction {fraction}")));
    }
    let (xt, xe) = x.split_at(cut * d_in);
    let (yt, ye) = match y {
        Targets::Real(t) => {
            let (a, b) = t.data().split_at(cut * d_out);
            (
                Targets::Real(Tensor::new(vec![cut, d_out], a.to_vec())?),
                Targets::Real(Tensor::new(vec![n - cut, d_out], b.to_vec())?),
            )
        }
        Targets::Classes(c) => (Targets::Classes(c[..cut].to_vec()), Targets::Classes(c[cut..].to_vec())),
    };
    Ok((
        VectorSplit { x: xt.to_vec(), y: yt, rows: cut },
        VectorSplit {
            x: xe.to_vec(),
            y: ye,
            rows: n - cut,
        },
    ))
}
