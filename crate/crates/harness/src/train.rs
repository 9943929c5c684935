//! The training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use velora_core::autograd::{cross_entropy_loss, mse_loss, BackwardCache, Input, Network, Optimizer};
use velora_core::memledger::LedgerReport;
use velora_core::rng::SeededRng;
use velora_core::Tensor;

use crate::checkpoint::{Checkpoint, CHECKPOINT_FILE};
use crate::config::ExperimentConfig;
use crate::dataset::{Batch, Dataset, DatasetError, Targets};
use crate::metrics::{run_id, Header, MetricsLine, MetricsWriter, StepRecord, StoredBytes, METRICS_FILE, RNG_ALGORITHM};
use crate::network::{build_network, policy_tags, snapshot};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("non-finite {what} at step {step} in layer {layer}")]
    NonFinite { step: u64, layer: String, what: &'static str },
    #[error("memory accounting mismatch at step {step}: ledger {ledger} bytes, cache {cache} bytes")]
    Accounting { step: u64, ledger: usize, cache: usize },
    #[error(transparent)]
    Core(#[from] velora_core::Error),
    #[error("cannot write run output: {0}")]
    Io(#[from] std::io::Error),
}

/// What a finished run leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub optimizer: Optimizer,
    pub checkpoint: Checkpoint,
    pub lines: Vec<MetricsLine>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Evaluation metric after each epoch.
    pub epoch_evals: Vec<f64>,
    /// Directory holding metrics, config and checkpoint, if one was set.
    pub out_dir: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> Option<f64> {
        self.epoch_evals.last().copied()
    }
}

pub fn forward(net: &mut Network, batch: &Batch, cache: Option<&mut BackwardCache>) -> velora_core::Result<Tensor> {
    match batch {
        Batch::Vector { x, .. } => net.forward(Input::Dense(x), cache),
        Batch::Tokens { ids, batch, len, .. } => net.forward(
            Input::Tokens {
                ids,
                batch: *batch,
                len: *len,
            },
            cache,
        ),
    }
}

/// Mean squared error for regression, mean cross-entropy otherwise.
pub fn loss(out: &Tensor, batch: &Batch) -> velora_core::Result<(f64, Tensor)> {
    match batch {
        Batch::Vector {
            targets: Targets::Real(y), ..
        } => mse_loss(out, y),
        Batch::Vector {
            targets: Targets::Classes(c),
            ..
        } => cross_entropy_loss(out, c),
        Batch::Tokens { targets, .. } => cross_entropy_loss(out, targets),
    }
}

/// Mean loss over the evaluation split, weighted by example count.
pub fn evaluate(net: &mut Network, data: &Dataset, batch_size: usize) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0;
    for batch in data.eval_batches(batch_size)? {
        let out = forward(net, &batch, None)?;
        let (l, _) = loss(&out, &batch)?;
        total += l * batch.size() as f64;
        count += batch.size();
    }
    Ok(total / count as f64)
}

fn stored_bytes(report: &LedgerReport) -> StoredBytes {
    StoredBytes {
        per_layer: report.per_layer.iter().map(|(k, v)| (k.clone(), v.activation_bytes)).collect(),
        activation_bytes: report.activation_bytes,
        full_equivalent_bytes: report.full_equivalent_bytes,
        projection_bytes: report.projection_bytes,
    }
}

/// Parameter owning the first non-finite gradient in backward order.
fn first_bad_gradient(net: &Network) -> Option<String> {
    net.params()
        .into_iter()
        .rev()
        .find(|p| p.grad.as_ref().is_some_and(|g| !g.all_finite()))
        .map(|p| p.name.rsplit_once('.').map_or(p.name.as_str(), |(layer, _)| layer).to_string())
}

struct Sink {
    lines: Vec<MetricsLine>,
    file: Option<MetricsWriter<BufWriter<File>>>,
}

impl Sink {
    fn push(&mut self, line: MetricsLine) -> std::io::Result<()> {
        if let Some(f) = &mut self.file {
            f.write(&line)?;
        }
        self.lines.push(line);
        Ok(())
    }
}

/// Trains for `cfg.epochs` epochs. Writes `metrics.jsonl`, `config.toml` and
/// `checkpoint.bin` into `cfg.out_dir` when it is set.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainOutcome, TrainError> {
    let data = Dataset::generate(&cfg.dataset, cfg.dtype())?;
    let mut net = build_network(cfg, &data)?;
    let mut opt = Optimizer::new(cfg.optimizer.kind());
    let id = run_id(cfg);

    let out_dir = cfg.out_dir.as_ref().map(PathBuf::from);
    let file = match &out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(CONFIG_FILE), cfg.to_canonical())?;
            Some(MetricsWriter::new(BufWriter::new(File::create(dir.join(METRICS_FILE))?)))
        }
        None => None,
    };
    let mut sink = Sink { lines: Vec::new(), file };
    sink.push(MetricsLine::Header(Header {
        run_id: id.clone(),
        dataset: cfg.dataset.clone(),
        rng: RNG_ALGORITHM.into(),
        dtype: cfg.dtype().to_string(),
        policies: policy_tags(&net),
    }))?;

    let mut step: u64 = 0;
    let mut step_losses = Vec::new();
    let mut epoch_evals = Vec::new();
    let mut clock = Instant::now();
    let mut since_log = 0u64;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut seen = 0;
        let mut last_stored = StoredBytes::default();
        for batch in data.train_batches(epoch, cfg.batch_size)? {
            let mut cache = BackwardCache::new();
            let out = forward(&mut net, &batch, Some(&mut cache))?;
            let (l, grad) = loss(&out, &batch)?;
            net.zero_grad();
            net.backward(&grad, &cache)?;
            if let Some(layer) = first_bad_gradient(&net) {
                return Err(TrainError::NonFinite {
                    step,
                    layer,
                    what: "gradient",
                });
            }
            if !l.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    layer: "loss".into(),
                    what: "loss",
                });
            }

            let report = net.memory_ledger(&batch.leading())?.report();
            if report.activation_bytes != cache.stored_bytes() {
                return Err(TrainError::Accounting {
                    step,
                    ledger: report.activation_bytes,
                    cache: cache.stored_bytes(),
                });
            }
            last_stored = stored_bytes(&report);
            drop(cache);

            opt.step(net.params_mut())?;
            step += 1;
            since_log += 1;
            step_losses.push(l);
            epoch_loss += l * batch.size() as f64;
            seen += batch.size();

            if step % cfg.log_every as u64 == 0 {
                let rate = throughput(cfg, &mut clock, &mut since_log);
                sink.push(MetricsLine::Step(StepRecord {
                    run_id: id.clone(),
                    step,
                    epoch: epoch as u64,
                    train_loss: l,
                    eval_metric: None,
                    stored: last_stored.clone(),
                    steps_per_sec: rate,
                }))?;
            }
        }
        let eval = evaluate(&mut net, &data, cfg.batch_size)?;
        if !eval.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                layer: "eval".into(),
                what: "evaluation metric",
            });
        }
        info!("epoch {epoch}: train {:.6} eval {eval:.6}", epoch_loss / seen as f64);
        epoch_evals.push(eval);
        let rate = throughput(cfg, &mut clock, &mut since_log);
        sink.push(MetricsLine::Epoch(StepRecord {
            run_id: id.clone(),
            step,
            epoch: epoch as u64,
            train_loss: epoch_loss / seen as f64,
            eval_metric: Some(eval),
            stored: last_stored,
            steps_per_sec: rate,
        }))?;
    }

    let next_rng = SeededRng::new(cfg.dataset.seed.unwrap_or(cfg.seed), 1 + cfg.epochs as u64).state();
    let checkpoint = snapshot(cfg, &net, &opt, step, cfg.epochs as u64, next_rng);
    if let Some(dir) = &out_dir {
        write_checkpoint(&dir.join(CHECKPOINT_FILE), &checkpoint)?;
    }
    Ok(TrainOutcome {
        network: net,
        optimizer: opt,
        checkpoint,
        lines: sink.lines,
        step_losses,
        epoch_evals,
        out_dir,
    })
}

/// Steps per second since the last record; `None` in deterministic mode so
/// metrics files stay byte-identical.
fn throughput(cfg: &ExperimentConfig, clock: &mut Instant, steps: &mut u64) -> Option<f64> {
    let elapsed = clock.elapsed().as_secs_f64();
    let rate = (*steps as f64 / elapsed.max(1e-9)).max(0.0);
    *clock = Instant::now();
    *steps = 0;
    (!cfg.deterministic).then_some(rate)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> std::io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&ck.encode())?;
    f.flush()
}
