//! Binary checkpoint container.
//!
//! Little-endian throughout; floats are stored as raw bits so decoding gives
//! back exactly what was encoded. The byte layout is described in
//! `docs/checkpoint.md`.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use velora_core::autograd::{AdamMoments, OptimizerKind};
use velora_core::compression::{InitStrategy, ProjectionVector, Provenance};
use velora_core::rng::RngState;
use velora_core::DType;

pub const MAGIC: &[u8; 8] = b"VLRACKPT";
pub const VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

const DIGEST_LEN: usize = 32;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch")]
    Checksum,
    #[error("{0} trailing bytes after checkpoint body")]
    Trailing(usize),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub dtype: DType,
    pub frozen: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical config text of the run.
    pub config: String,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Shuffle rng the next epoch would start from.
    pub rng: RngState,
    pub optimizer: OptimizerKind,
    pub optimizer_step: u64,
    pub moments: BTreeMap<String, AdamMoments>,
    pub params: Vec<ParamRecord>,
    pub projections: Vec<ProjectionVector>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config);
        w.u64(self.step);
        w.u64(self.epoch);
        w.u64(self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        match self.optimizer {
            OptimizerKind::Sgd { lr } => {
                w.u8(0);
                w.f64s(&[lr]);
            }
            OptimizerKind::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                w.u8(1);
                w.f64s(&[lr, beta1, beta2, eps, weight_decay]);
            }
        }
        w.u64(self.optimizer_step);
        w.len(self.moments.len());
        for (name, m) in &self.moments {
            w.str(name);
            w.vec(&m.m);
            w.vec(&m.v);
        }

        w.len(self.params.len());
        for p in &self.params {
            w.str(&p.name);
            w.u8(dtype_code(p.dtype));
            w.u8(p.frozen as u8);
            w.len(p.shape.len());
            for &d in &p.shape {
                w.u64(d as u64);
            }
            w.f64s(&p.data);
        }

        w.len(self.projections.len());
        for pv in &self.projections {
            w.str(pv.layer_id());
            w.u8(strategy_code(pv.strategy()));
            w.u8(pv.frozen() as u8);
            w.u8(matches!(pv.provenance(), Provenance::FallbackRandom) as u8);
            w.u64(pv.generation());
            w.f64s(&[pv.momentum()]);
            w.vec(pv.v());
            w.vec(pv.accumulator());
        }

        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(CheckpointError::Truncated("header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }

        let config = r.str("config")?;
        let step = r.u64("step")?;
        let epoch = r.u64("epoch")?;
        let rng = RngState {
            seed: r.u64("rng seed")?,
            stream: r.u64("rng stream")?,
            word_pos: u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap()),
        };

        let optimizer = match r.u8("optimizer kind")? {
            0 => OptimizerKind::Sgd { lr: r.f64("lr")? },
            1 => OptimizerKind::AdamW {
                lr: r.f64("lr")?,
                beta1: r.f64("beta1")?,
                beta2: r.f64("beta2")?,
                eps: r.f64("eps")?,
                weight_decay: r.f64("weight decay")?,
            },
            k => return Err(invalid("optimizer kind", format!("unknown code {k}"))),
        };
        let optimizer_step = r.u64("optimizer step")?;
        let mut moments = BTreeMap::new();
        for _ in 0..r.count("moments", 8)? {
            let name = r.str("moment name")?;
            let m = r.vec("first moment")?;
            let v = r.vec("second moment")?;
            if m.len() != v.len() {
                return Err(invalid("moments", format!("{name}: lengths {} and {}", m.len(), v.len())));
            }
            // the encoder writes names in map order, so anything else is not canonical
            if moments.keys().next_back().is_some_and(|last: &String| *last >= name) {
                return Err(invalid("moments", format!("entry {name} out of order or duplicated")));
            }
            moments.insert(name, AdamMoments { m, v });
        }

        let mut params: Vec<ParamRecord> = Vec::new();
        for _ in 0..r.count("params", 8)? {
            let name = r.str("param name")?;
            let dtype = match r.u8("param dtype")? {
                0 => DType::F32,
                1 => DType::F64,
                c => return Err(invalid("param dtype", format!("unknown code {c}"))),
            };
            let frozen = r.bool("param frozen")?;
            let rank = r.count("param rank", 8)?;
            if rank > MAX_RANK {
                return Err(invalid("param rank", format!("{rank} exceeds {MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64("param dim")?).map_err(|_| invalid("param dim", "too large"))?;
                numel = numel.checked_mul(d).ok_or_else(|| invalid("param shape", "element count overflows"))?;
                shape.push(d);
            }
            let data = r.f64s(numel, "param data")?;
            if params.iter().any(|p| p.name == name) {
                return Err(invalid("params", format!("duplicate entry {name}")));
            }
            params.push(ParamRecord {
                name,
                dtype,
                frozen,
                shape,
                data,
            });
        }

        let mut projections = Vec::new();
        for _ in 0..r.count("projections", 8)? {
            let layer_id = r.str("projection layer")?;
            let strategy = match r.u8("projection strategy")? {
                0 => InitStrategy::Random,
                1 => InitStrategy::Svd,
                2 => InitStrategy::FixedAverage,
                3 => InitStrategy::RunningAverage,
                c => return Err(invalid("projection strategy", format!("unknown code {c}"))),
            };
            let frozen = r.bool("projection frozen")?;
            let provenance = if r.bool("projection provenance")? {
                Provenance::FallbackRandom
            } else {
                Provenance::Requested
            };
            let generation = r.u64("projection generation")?;
            let momentum = r.f64("projection momentum")?;
            let v = r.vec("projection vector")?;
            let accumulator = r.vec("projection accumulator")?;
            let pv = ProjectionVector::from_parts(layer_id, strategy, v, frozen, momentum, accumulator)
                .map_err(|e| invalid("projection", e.to_string()))?;
            projections.push(pv.with_history(provenance, generation));
        }

        if r.pos != body.len() {
            return Err(CheckpointError::Trailing(body.len() - r.pos));
        }
        Ok(Self {
            config,
            step,
            epoch,
            rng,
            optimizer,
            optimizer_step,
            moments,
            params,
            projections,
        })
    }
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn strategy_code(s: InitStrategy) -> u8 {
    match s {
        InitStrategy::Random => 0,
        InitStrategy::Svd => 1,
        InitStrategy::FixedAverage => 2,
        InitStrategy::RunningAverage => 3,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.u64(x.to_bits());
        }
    }
    fn vec(&mut self, xs: &[f64]) {
        self.len(xs.len());
        self.f64s(xs);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
    fn bool(&mut self, what: &'static str) -> Result<bool, CheckpointError> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(invalid(what, format!("flag byte {b}"))),
        }
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        self.u64(what).map(f64::from_bits)
    }
    /// A length prefix, checked against the bytes left so a corrupt count
    /// cannot trigger a huge allocation.
    fn count(&mut self, what: &'static str, min_item: usize) -> Result<usize, CheckpointError> {
        let n = self.u64(what)?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(min_item as u64) > left && n > 0 && min_item > 0 {
            return Err(CheckpointError::Truncated(what));
        }
        Ok(n as usize)
    }
    fn str(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.count(what, 1)?;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| invalid(what, "not utf-8"))
    }
    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect())
    }
    fn vec(&mut self, what: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let n = self.count(what, 8)?;
        self.f64s(n, what)
    }
}
