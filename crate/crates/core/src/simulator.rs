//! Single-process simulation of synchronous data-parallel SGD through a
//! parameter server.
//!
//! Workers are simulated one after another on the same parameters: each computes
//! its shard gradient, compresses it with its own state, and the server averages
//! the decompressed messages before applying one SGD step.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compressors::{compress_ops, decompress, CompressorConfig, WorkerCompressor};
use crate::costmodel::{quantized_bits_per_component, CostModel};
use crate::error::{Error, Result};
use crate::models::{perplexity, synth_data, DataConfig, Dataset, ModelSpec, Splits};
use crate::numerics::{Purpose, Rng};

pub const SCHEMA_VERSION: u32 = 1;

/// A run aborts once the step loss exceeds this multiple of the first step's loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Storage precision for gradients, averaged updates and parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Single,
    /// Diagnostic mode: keep everything in 64-bit. Identity compression only.
    Double,
}

/// Source of the computation-time column.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeClock {
    /// Operation counts divided by `ops_per_second`; reproducible.
    #[default]
    Modeled,
    /// Measured thread CPU time; not reproducible across runs.
    Process,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_workers() -> usize {
    1
}
fn default_batch() -> usize {
    256
}
fn default_max_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    10
}
fn default_seed() -> u64 {
    42
}
fn default_ops_per_second() -> f64 {
    1e9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub compressor: CompressorConfig,
    pub learning_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub legacy_patience: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub clock: ComputeClock,
    #[serde(default = "default_ops_per_second")]
    pub ops_per_second: f64,
}

impl RunConfig {
    /// Config with defaults for everything but the essentials.
    pub fn new(model: ModelSpec, compressor: CompressorConfig, learning_rate: f64) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            model,
            data: DataConfig::default(),
            workers: default_workers(),
            batch_size: default_batch(),
            compressor,
            learning_rate,
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            legacy_patience: false,
            seed: default_seed(),
            cost: CostModel::default(),
            precision: Precision::Single,
            clock: ComputeClock::Modeled,
            ops_per_second: default_ops_per_second(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}", self.schema_version),
            ));
        }
        self.model.validate()?;
        self.data.validate()?;
        self.compressor.validate()?;
        self.cost.validate()?;
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(self.workers) {
            return Err(Error::config(
                "batch_size",
                "must be a positive multiple of workers",
            ));
        }
        if self.batch_size > self.data.train {
            return Err(Error::config("batch_size", "exceeds the training set size"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(
                "learning_rate",
                "must be positive and finite",
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if !(self.ops_per_second > 0.0) {
            return Err(Error::config("ops_per_second", "must be positive"));
        }
        if let Some(levels) = self.compressor.levels() {
            quantized_bits_per_component(levels)
                .map_err(|e| Error::config("compressor.levels", e.to_string()))?;
        }
        if self.precision == Precision::Double && self.compressor != CompressorConfig::Identity {
            return Err(Error::config(
                "precision",
                "double precision is only available with identity compression",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
    pub test_ce: f64,
    pub val_ppl: f64,
    pub comp_seconds: f64,
    pub comm_seconds: f64,
    pub bits_sent: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub status: RunStatus,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch with the best validation CE.
    pub convergence_epoch: Option<usize>,
    pub best_val_ce: Option<f64>,
    pub stopped_early: bool,
    pub param_count: usize,
    pub steps: u64,
    pub checkpoint_sha256: String,
    #[serde(skip)]
    pub checkpoint: Vec<f64>,
}

impl RunResult {
    pub fn best_epoch(&self) -> Option<&EpochMetrics> {
        self.convergence_epoch.and_then(|e| self.epochs.get(e))
    }
}

/// What one validation observation means for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Improved,
    NoImprovement,
    Stop,
}

/// Early stopping on validation loss.
///
/// The default counts consecutive epochs without improvement. Legacy mode keeps a
/// counter that is never reset, so any non-improving epoch counts toward patience.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    legacy: bool,
    best: f64,
    best_epoch: Option<usize>,
    counter: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, legacy: bool) -> Self {
        EarlyStopping {
            patience,
            legacy,
            best: f64::INFINITY,
            best_epoch: None,
            counter: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val: f64) -> Observation {
        if val < self.best {
            self.best = val;
            self.best_epoch = Some(epoch);
            if !self.legacy {
                self.counter = 0;
            }
            return Observation::Improved;
        }
        self.counter += 1;
        if self.counter >= self.patience {
            Observation::Stop
        } else {
            Observation::NoImprovement
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best_epoch.map(|_| self.best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub loss: f64,
    /// Largest single-worker message; the synchronous barrier waits for it.
    pub max_message_bits: u64,
    pub total_bits: u64,
    pub comm_seconds: f64,
    pub ops: u64,
}

#[cfg(unix)]
fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec.
    unsafe {
        libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts);
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

#[cfg(not(unix))]
fn thread_cpu_seconds() -> f64 {
    0.0
}

fn round32(x: f64) -> f64 {
    (x as f32) as f64
}

/// Live state of one simulated run.
pub struct Simulation {
    cfg: RunConfig,
    splits: Splits,
    params: Vec<f64>,
    compressors: Vec<WorkerCompressor>,
    dropout_rngs: Vec<Rng>,
    compress_rngs: Vec<Rng>,
    shuffle_rng: Rng,
    initial_loss: Option<f64>,
    steps: u64,
}

impl Simulation {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let splits = synth_data(&cfg.model, &cfg.data, cfg.seed);
        Self::with_data(cfg, splits)
    }

    /// Simulation on caller-supplied data (the config's `data` section is ignored).
    pub fn with_data(cfg: &RunConfig, splits: Splits) -> Result<Self> {
        let n = cfg.model.param_count();
        let mut params = cfg
            .model
            .init_params(&mut Rng::for_purpose(cfg.seed, Purpose::Init, 0));
        if cfg.precision == Precision::Single {
            params.iter_mut().for_each(|p| *p = round32(*p));
        }
        let compressors = (0..cfg.workers)
            .map(|_| WorkerCompressor::new(&cfg.compressor, n, cfg.workers))
            .collect::<Result<_>>()?;
        let per_worker = |purpose| {
            (0..cfg.workers as u64)
                .map(|w| Rng::for_purpose(cfg.seed, purpose, w))
                .collect()
        };
        Ok(Simulation {
            cfg: cfg.clone(),
            splits,
            params,
            compressors,
            dropout_rngs: per_worker(Purpose::Dropout),
            compress_rngs: per_worker(Purpose::Compress),
            shuffle_rng: Rng::for_purpose(cfg.seed, Purpose::Shuffle, 0),
            initial_loss: None,
            steps: 0,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn compressors(&self) -> &[WorkerCompressor] {
        &self.compressors
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        for c in &mut self.compressors {
            c.set_epoch(epoch as u32);
        }
    }

    /// One synchronous step on the training rows `batch` (split evenly across workers).
    pub fn step(&mut self, batch: &[usize]) -> Result<StepMetrics> {
        let workers = self.cfg.workers;
        if batch.is_empty() || !batch.len().is_multiple_of(workers) {
            return Err(Error::config(
                "batch_size",
                "batch must split evenly across workers",
            ));
        }
        let n = self.params.len();
        let shard = batch.len() / workers;
        let model = self.cfg.model;
        let mut acc = vec![0.0f64; n];
        let mut metrics = StepMetrics::default();
        for w in 0..workers {
            let rows = &batch[w * shard..(w + 1) * shard];
            let (loss, grad) = model.loss_and_grad(
                &self.params,
                &self.splits.train,
                rows,
                Some(&mut self.dropout_rngs[w]),
            )?;
            metrics.loss += loss / workers as f64;
            metrics.ops += model.ops_per_example() * shard as u64;
            let bits = match self.cfg.precision {
                Precision::Single => {
                    let g32: Vec<f32> = grad.iter().map(|&x| x as f32).collect();
                    let msg = self.compressors[w].compress(&g32, &mut self.compress_rngs[w])?;
                    for (a, x) in acc.iter_mut().zip(decompress(&msg, n)?) {
                        *a += x as f64;
                    }
                    metrics.ops += compress_ops(&self.cfg.compressor, n);
                    self.cfg.cost.message_bits(&msg)?
                }
                Precision::Double => {
                    for (a, x) in acc.iter_mut().zip(&grad) {
                        *a += x;
                    }
                    self.cfg.cost.dense_bits(n)
                }
            };
            metrics.max_message_bits = metrics.max_message_bits.max(bits);
            metrics.total_bits += bits;
        }

        let initial = *self.initial_loss.get_or_insert(metrics.loss);
        if !metrics.loss.is_finite() || metrics.loss > DIVERGENCE_FACTOR * initial.max(1e-12) {
            return Err(Error::Diverged);
        }

        let lr = self.cfg.learning_rate;
        let inv_w = 1.0 / workers as f64;
        match self.cfg.precision {
            Precision::Single => {
                for (p, a) in self.params.iter_mut().zip(&acc) {
                    *p = round32(*p - lr * round32(a * inv_w));
                }
            }
            Precision::Double => {
                for (p, a) in self.params.iter_mut().zip(&acc) {
                    *p -= lr * (a * inv_w);
                }
            }
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged);
        }
        metrics.comm_seconds = self.cfg.cost.exchange_time(metrics.max_message_bits, n);
        self.steps += 1;
        Ok(metrics)
    }

    /// Mean CE (or MSE for the quadratic task) on a dataset, without dropout.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        self.cfg.model.loss(&self.params, data, &data.all_rows())
    }
}

struct Totals {
    bits: u64,
    dense_bits: u64,
}

/// Runs `cfg` to completion, reporting each epoch to `on_epoch`.
pub fn train<F>(cfg: &RunConfig, on_epoch: F) -> Result<RunResult>
where
    F: FnMut(&EpochMetrics),
{
    let sim = Simulation::new(cfg)?;
    train_simulation(sim, on_epoch)
}

pub fn train_simulation<F>(mut sim: Simulation, mut on_epoch: F) -> Result<RunResult>
where
    F: FnMut(&EpochMetrics),
{
    let cfg = sim.cfg.clone();
    let n = cfg.model.param_count();
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.legacy_patience);
    let mut epochs = Vec::new();
    let mut checkpoint = sim.params.clone();
    let mut totals = Totals {
        bits: 0,
        dense_bits: 0,
    };
    let mut status = RunStatus::Completed;
    let mut stopped_early = false;
    let mut order = sim.splits.train.all_rows();

    'epochs: for epoch in 0..cfg.max_epochs {
        sim.set_epoch(epoch);
        sim.shuffle_rng.shuffle(&mut order);
        let mut comm_seconds = 0.0;
        let mut ops = 0u64;
        let cpu_start = thread_cpu_seconds();
        for batch in order.chunks_exact(cfg.batch_size) {
            match sim.step(batch) {
                Ok(m) => {
                    comm_seconds += m.comm_seconds;
                    ops += m.ops;
                    totals.bits += m.total_bits;
                    totals.dense_bits += cfg.cost.dense_bits(n) * cfg.workers as u64;
                }
                Err(Error::Diverged) => {
                    status = RunStatus::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let comp_total = match cfg.clock {
            ComputeClock::Modeled => ops as f64 / cfg.ops_per_second,
            ComputeClock::Process => thread_cpu_seconds() - cpu_start,
        };
        let evals = (|| {
            Ok::<_, Error>((
                sim.evaluate(&sim.splits.train)?,
                sim.evaluate(&sim.splits.validation)?,
                sim.evaluate(&sim.splits.test)?,
            ))
        })();
        let (train_ce, val_ce, test_ce) = match evals {
            Ok(v) => v,
            Err(Error::Diverged) => {
                status = RunStatus::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        let metrics = EpochMetrics {
            epoch,
            train_ce,
            val_ce,
            test_ce,
            val_ppl: perplexity(val_ce),
            comp_seconds: comp_total / cfg.workers as f64,
            comm_seconds,
            bits_sent: totals.bits,
            ratio: if totals.bits == 0 {
                0.0
            } else {
                totals.dense_bits as f64 / totals.bits as f64
            },
        };
        on_epoch(&metrics);
        epochs.push(metrics);
        match stopper.observe(epoch, val_ce) {
            Observation::Improved => checkpoint.clone_from(&sim.params),
            Observation::NoImprovement => {}
            Observation::Stop => {
                stopped_early = epoch + 1 < cfg.max_epochs;
                break;
            }
        }
    }

    let mut hasher = Sha256::new();
    for p in &checkpoint {
        hasher.update(p.to_le_bytes());
    }
    Ok(RunResult {
        status,
        epochs,
        convergence_epoch: stopper.best_epoch(),
        best_val_ce: stopper.best(),
        stopped_early,
        param_count: n,
        steps: sim.steps,
        checkpoint_sha256: hex::encode(hasher.finalize()),
        checkpoint,
    })
}
