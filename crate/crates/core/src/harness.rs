//! Experiment harness: config files, single runs, random-search sweeps over the
//! compression grid, and tidy CSV reports aggregated from sweep directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compressors::CompressorConfig;
use crate::error::{Error, Result};
use crate::models::perplexity;
use crate::numerics::{Purpose, Rng};
use crate::simulator::{train, RunConfig, RunResult, RunStatus};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const BEST_FILE: &str = "best.json";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Deserialize with the failing field path attached to the error.
fn from_table<T: DeserializeOwned>(table: toml::Table, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(table).map_err(|e| {
        let path = e.path().to_string();
        let field = match (prefix.is_empty(), path.as_str()) {
            (true, _) => path.clone(),
            (false, ".") => prefix.to_string(),
            (false, _) => format!("{prefix}.{path}"),
        };
        Error::config(field, e.into_inner().to_string())
    })
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config("<syntax>", e.to_string()))
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = from_table(parse_table(text)?, "")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&read_text(path)?)
}

/// Hash of the canonical (key-sorted) JSON form, so field order in the file is irrelevant.
pub fn config_hash(cfg: &RunConfig) -> String {
    let canonical = serde_json::to_value(cfg).expect("config serializes");
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(digest)[..16].to_string()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary<'a> {
    pub config_hash: String,
    pub status: RunStatus,
    pub nominal_ratio: f64,
    pub achieved_ratio: Option<f64>,
    pub config: &'a RunConfig,
    pub result: &'a RunResult,
}

/// Trains `cfg` and writes `metrics.csv` and `summary.json` into `dir`.
pub fn execute_run(cfg: &RunConfig, dir: &Path) -> Result<RunResult> {
    cfg.validate()?;
    let result = train(cfg, |_| {})?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut writer =
        csv::Writer::from_path(&metrics_path).map_err(|e| Error::io(&metrics_path, e.into()))?;
    if result.epochs.is_empty() {
        writer
            .write_record(METRICS_COLUMNS)
            .map_err(|e| Error::io(&metrics_path, e.into()))?;
    }
    for row in &result.epochs {
        writer
            .serialize(row)
            .map_err(|e| Error::io(&metrics_path, e.into()))?;
    }
    writer.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let summary = RunSummary {
        config_hash: config_hash(cfg),
        status: result.status,
        nominal_ratio: cfg
            .cost
            .compression_ratio(&cfg.compressor, cfg.model.param_count())?,
        achieved_ratio: result.epochs.last().map(|m| m.ratio),
        config: cfg,
        result: &result,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&dir.join(SUMMARY_FILE), &(json + "\n"))?;
    Ok(result)
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "epoch",
    "train_ce",
    "val_ce",
    "test_ce",
    "val_ppl",
    "comp_seconds",
    "comm_seconds",
    "bits_sent",
    "ratio",
];

/// `run` subcommand: load, validate, execute.
pub fn cmd_run(config: &Path, out: &Path, legacy_patience: bool) -> Result<RunResult> {
    let mut cfg = load_run_config(config)?;
    cfg.legacy_patience |= legacy_patience;
    execute_run(&cfg, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    Uniform { low: f64, high: f64 },
    LogUniform { low: f64, high: f64 },
    Fixed { value: f64 },
}

impl Distribution {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let u = rng.next_f64();
        match *self {
            Distribution::Uniform { low, high } => low + (high - low) * u,
            Distribution::LogUniform { low, high } => (low.ln() + (high.ln() - low.ln()) * u).exp(),
            Distribution::Fixed { value } => value,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        match *self {
            Distribution::Uniform { low, high } if low <= high => Ok(()),
            Distribution::LogUniform { low, high } if low > 0.0 && low <= high => Ok(()),
            Distribution::Fixed { value } if value.is_finite() => Ok(()),
            _ => Err(Error::config(field, "empty or invalid range")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    /// Named learning-rate range; `paper-lstm` is uniform on [1, 50].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<Distribution>,
    #[serde(default = "SearchSpace::default_dropout")]
    pub dropout: Distribution,
    #[serde(default = "SearchSpace::default_momentum")]
    pub momentum: Distribution,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            preset: None,
            learning_rate: None,
            dropout: Self::default_dropout(),
            momentum: Self::default_momentum(),
        }
    }
}

impl SearchSpace {
    fn default_dropout() -> Distribution {
        Distribution::Uniform {
            low: 0.0,
            high: 0.8,
        }
    }
    fn default_momentum() -> Distribution {
        Distribution::Uniform {
            low: 0.1,
            high: 0.9,
        }
    }

    pub fn learning_rate(&self) -> Result<Distribution> {
        if let Some(d) = &self.learning_rate {
            return Ok(d.clone());
        }
        match self.preset.as_deref() {
            None => Ok(Distribution::LogUniform {
                low: 1e-3,
                high: 1.0,
            }),
            Some("paper-lstm") => Ok(Distribution::Uniform {
                low: 1.0,
                high: 50.0,
            }),
            Some(other) => Err(Error::config(
                "search.preset",
                format!("unknown preset `{other}`"),
            )),
        }
    }
}

/// One method axis of the grid, expanded over its keep fractions or level counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodAxis {
    pub method: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keep: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<u32>,
    /// Extra fixed compressor fields, e.g. `residual = false`.
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub options: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default = "Grid::default_workers")]
    pub workers: Vec<usize>,
    pub methods: Vec<MethodAxis>,
}

impl Grid {
    fn default_workers() -> Vec<usize> {
        vec![1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "SweepSpec::default_schema")]
    pub schema_version: u32,
    #[serde(default = "SweepSpec::default_iterations")]
    pub iterations: usize,
    #[serde(default = "SweepSpec::default_seed")]
    pub seed: u64,
    /// Run config template; the sweep fills in compressor, workers, learning rate, dropout.
    pub base: toml::Table,
    #[serde(default)]
    pub search: SearchSpace,
    pub grid: Grid,
}

impl SweepSpec {
    fn default_schema() -> u32 {
        1
    }
    fn default_iterations() -> usize {
        60
    }
    fn default_seed() -> u64 {
        42
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::config("schema_version", "unsupported version"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if self.grid.workers.is_empty() || self.grid.methods.is_empty() {
            return Err(Error::config(
                "grid",
                "needs at least one worker count and method",
            ));
        }
        self.search
            .learning_rate()?
            .validate("search.learning_rate")?;
        self.search.dropout.validate("search.dropout")?;
        self.search.momentum.validate("search.momentum")?;
        // Every cell must produce a valid config.
        for cell in self.cells()? {
            self.run_config(&cell, &Hyperparams::default_for_check())?;
        }
        Ok(())
    }

    /// Grid cells in a fixed order: method axes, then their values, then workers.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut cells = Vec::new();
        for axis in &self.grid.methods {
            let settings: Vec<(Option<f64>, Option<u32>)> = match axis.method.as_str() {
                "identity" => vec![(None, None)],
                "random_k" | "top_k" | "dgc" => {
                    if axis.keep.is_empty() {
                        return Err(Error::config(
                            "grid.methods.keep",
                            format!("`{}` needs keep fractions", axis.method),
                        ));
                    }
                    axis.keep.iter().map(|&k| (Some(k), None)).collect()
                }
                "qsgd" => {
                    if axis.levels.is_empty() {
                        return Err(Error::config("grid.methods.levels", "qsgd needs levels"));
                    }
                    axis.levels.iter().map(|&s| (None, Some(s))).collect()
                }
                other => {
                    return Err(Error::config(
                        "grid.methods.method",
                        format!("unknown method `{other}`"),
                    ))
                }
            };
            for (keep, levels) in settings {
                for &workers in &self.grid.workers {
                    cells.push(Cell {
                        method: axis.method.clone(),
                        keep,
                        levels,
                        workers,
                        options: axis.options.clone(),
                    });
                }
            }
        }
        Ok(cells)
    }

    /// Hyperparameters for every iteration of cell `index`.
    pub fn sample(&self, index: usize) -> Result<Vec<Hyperparams>> {
        let lr = self.search.learning_rate()?;
        let mut rng = Rng::for_purpose(self.seed, Purpose::Sweep, index as u64);
        Ok((0..self.iterations)
            .map(|_| Hyperparams {
                learning_rate: lr.sample(&mut rng),
                dropout: self.search.dropout.sample(&mut rng),
                momentum: self.search.momentum.sample(&mut rng),
            })
            .collect())
    }

    pub fn run_config(&self, cell: &Cell, hp: &Hyperparams) -> Result<RunConfig> {
        let mut table = self.base.clone();
        let mut compressor = cell.options.clone();
        compressor.insert("method".into(), cell.method.clone().into());
        if let Some(k) = cell.keep {
            compressor.insert("keep".into(), k.into());
        }
        if let Some(s) = cell.levels {
            compressor.insert("levels".into(), (s as i64).into());
        }
        if cell.method == "dgc" && !compressor.contains_key("momentum") {
            compressor.insert("momentum".into(), hp.momentum.into());
        }
        table.insert("compressor".into(), compressor.into());
        table.insert("workers".into(), (cell.workers as i64).into());
        table.insert("learning_rate".into(), hp.learning_rate.into());
        let mut cfg: RunConfig = from_table(table, "base")?;
        if cfg.model.supports_dropout() {
            cfg.model = cfg.model.with_dropout(hp.dropout);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_sweep_spec(path: &Path) -> Result<SweepSpec> {
    let spec: SweepSpec = from_table(parse_table(&read_text(path)?)?, "")?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: String,
    pub keep: Option<f64>,
    pub levels: Option<u32>,
    pub workers: usize,
    pub options: toml::Table,
}

impl Cell {
    pub fn id(&self) -> String {
        let setting = match (self.keep, self.levels) {
            (Some(k), _) => format!("_k{k}"),
            (_, Some(s)) => format!("_s{s}"),
            _ => String::new(),
        };
        format!("{}{}_w{}", self.method, setting, self.workers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub dropout: f64,
    pub momentum: f64,
}

impl Hyperparams {
    fn default_for_check() -> Self {
        Hyperparams {
            learning_rate: 0.1,
            dropout: 0.0,
            momentum: 0.5,
        }
    }
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell_id: String,
    pub run: usize,
    pub config_hash: String,
    pub method: String,
    pub keep: Option<f64>,
    pub levels: Option<u32>,
    pub workers: usize,
    pub nominal_ratio: f64,
    pub learning_rate: f64,
    pub dropout: Option<f64>,
    pub momentum: Option<f64>,
    pub status: String,
    pub epochs_run: usize,
    pub convergence_epoch: Option<usize>,
    pub best_val_ce: Option<f64>,
    pub best_val_ppl: Option<f64>,
    pub test_ce: Option<f64>,
    pub test_ppl: Option<f64>,
    pub comp_seconds: f64,
    pub comm_seconds: f64,
    pub comp_seconds_per_epoch: Option<f64>,
    pub comm_seconds_per_epoch: Option<f64>,
    pub bits_sent: u64,
    pub achieved_ratio: Option<f64>,
    pub stopped_early: bool,
    pub run_dir: String,
    pub config_json: String,
}

impl SweepRow {
    pub fn succeeded(&self) -> bool {
        self.status == "completed"
    }

    /// The full run config echoed in this row.
    pub fn config(&self) -> Result<RunConfig> {
        serde_json::from_str(&self.config_json)
            .map_err(|e| Error::config("config_json", e.to_string()))
    }
}

fn sweep_row(
    cell: &Cell,
    run: usize,
    cfg: &RunConfig,
    run_dir: &Path,
    outcome: Result<RunResult>,
) -> SweepRow {
    let nominal_ratio = cfg
        .cost
        .compression_ratio(&cfg.compressor, cfg.model.param_count())
        .unwrap_or(f64::NAN);
    let mut row = SweepRow {
        cell_id: cell.id(),
        run,
        config_hash: config_hash(cfg),
        method: cell.method.clone(),
        keep: cell.keep,
        levels: cell.levels,
        workers: cell.workers,
        nominal_ratio,
        learning_rate: cfg.learning_rate,
        dropout: cfg.model.supports_dropout().then(|| cfg.model.dropout()),
        momentum: match &cfg.compressor {
            CompressorConfig::Dgc(d) => Some(d.momentum),
            _ => None,
        },
        status: String::new(),
        epochs_run: 0,
        convergence_epoch: None,
        best_val_ce: None,
        best_val_ppl: None,
        test_ce: None,
        test_ppl: None,
        comp_seconds: 0.0,
        comm_seconds: 0.0,
        comp_seconds_per_epoch: None,
        comm_seconds_per_epoch: None,
        bits_sent: 0,
        achieved_ratio: None,
        stopped_early: false,
        run_dir: run_dir.display().to_string(),
        config_json: serde_json::to_string(cfg).expect("config serializes"),
    };
    match outcome {
        Err(e) => row.status = format!("error: {e}"),
        Ok(result) => {
            row.status = match result.status {
                RunStatus::Completed => "completed".into(),
                RunStatus::Diverged => "diverged".into(),
            };
            let epochs = result.epochs.len();
            row.epochs_run = epochs;
            row.convergence_epoch = result.convergence_epoch;
            row.best_val_ce = result.best_val_ce;
            row.best_val_ppl = result.best_val_ce.map(perplexity);
            if let Some(best) = result.best_epoch() {
                row.test_ce = Some(best.test_ce);
                row.test_ppl = Some(perplexity(best.test_ce));
            }
            row.comp_seconds = result.epochs.iter().map(|m| m.comp_seconds).sum();
            row.comm_seconds = result.epochs.iter().map(|m| m.comm_seconds).sum();
            if epochs > 0 {
                row.comp_seconds_per_epoch = Some(row.comp_seconds / epochs as f64);
                row.comm_seconds_per_epoch = Some(row.comm_seconds / epochs as f64);
            }
            if let Some(last) = result.epochs.last() {
                row.bits_sent = last.bits_sent;
                row.achieved_ratio = Some(last.ratio);
            }
            row.stopped_early = result.stopped_early;
        }
    }
    row
}

#[derive(Debug, Clone, Serialize)]
struct BestCell<'a> {
    cell_id: String,
    runs: usize,
    successful_runs: usize,
    best: Option<&'a SweepRow>,
}

/// Lowest best-validation-CE run among the successful rows.
pub fn best_row<'a>(rows: impl IntoIterator<Item = &'a SweepRow>) -> Option<&'a SweepRow> {
    rows.into_iter()
        .filter(|r| r.succeeded() && r.best_val_ce.is_some())
        .min_by(|a, b| {
            a.best_val_ce
                .unwrap()
                .total_cmp(&b.best_val_ce.unwrap())
                .then(a.run.cmp(&b.run))
        })
}

/// Runs every grid cell for `iterations` sampled hyperparameter sets.
///
/// Runs are dispatched to up to `jobs` threads; every run owns its RNG streams, so
/// results do not depend on scheduling. `progress` sees each finished row.
pub fn run_sweep<P>(spec: &SweepSpec, out: &Path, jobs: usize, progress: P) -> Result<Vec<SweepRow>>
where
    P: Fn(&SweepRow) + Sync,
{
    spec.validate()?;
    let cells = spec.cells()?;
    let mut tasks = Vec::new();
    for (index, cell) in cells.iter().enumerate() {
        for (run, hp) in spec.sample(index)?.into_iter().enumerate() {
            let cfg = spec.run_config(cell, &hp)?;
            let dir = out
                .join("cells")
                .join(cell.id())
                .join(format!("run_{run:03}"));
            tasks.push((cell, run, cfg, dir));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; tasks.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((cell, run, cfg, dir)) = tasks.get(i) else {
                    break;
                };
                let row = sweep_row(cell, *run, cfg, dir, execute_run(cfg, dir));
                progress(&row);
                slots.lock().expect("no poisoned workers")[i] = Some(row);
            });
        }
    });
    let rows: Vec<SweepRow> = slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect();

    write_csv(&out.join(SWEEP_FILE), &rows)?;
    for cell in &cells {
        let id = cell.id();
        let cell_rows: Vec<&SweepRow> = rows.iter().filter(|r| r.cell_id == id).collect();
        let best = BestCell {
            cell_id: id.clone(),
            runs: cell_rows.len(),
            successful_runs: cell_rows.iter().filter(|r| r.succeeded()).count(),
            best: best_row(cell_rows.iter().copied()),
        };
        let json = serde_json::to_string_pretty(&best).expect("best serializes");
        write_text(&out.join("cells").join(&id).join(BEST_FILE), &(json + "\n"))?;
    }
    Ok(rows)
}

pub fn cmd_sweep(
    spec_path: &Path,
    out: &Path,
    jobs: usize,
    legacy_patience: bool,
) -> Result<Vec<SweepRow>> {
    let mut spec = load_sweep_spec(spec_path)?;
    if legacy_patience {
        spec.base.insert("legacy_patience".into(), true.into());
    }
    run_sweep(&spec, out, jobs, |row| {
        eprintln!("{} run {:03}: {}", row.cell_id, row.run, row.status)
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::io(path, e.into()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads `sweep.csv` rows from each directory.
pub fn load_sweep_rows(dirs: &[PathBuf]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for dir in dirs {
        let path = dir.join(SWEEP_FILE);
        let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
        for record in reader.deserialize() {
            rows.push(record.map_err(|e| Error::Data {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    PerfVsRatio,
    TimeStack,
    Convergence,
    HyperparamDist,
}

impl std::str::FromStr for ReportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perf_vs_ratio" => Ok(ReportKind::PerfVsRatio),
            "time_stack" => Ok(ReportKind::TimeStack),
            "convergence" => Ok(ReportKind::Convergence),
            "hyperparam_dist" => Ok(ReportKind::HyperparamDist),
            other => Err(Error::config("kind", format!("unknown report `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfRow {
    pub method: String,
    pub keep: Option<f64>,
    pub levels: Option<u32>,
    pub workers: usize,
    pub nominal_ratio: f64,
    pub runs: usize,
    pub best_val_ce: Option<f64>,
    pub best_val_ppl: Option<f64>,
    pub test_ce: Option<f64>,
    pub test_ppl: Option<f64>,
    pub learning_rate: Option<f64>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeRow {
    pub method: String,
    pub keep: Option<f64>,
    pub levels: Option<u32>,
    pub workers: usize,
    pub nominal_ratio: f64,
    pub comp_seconds_per_epoch: Option<f64>,
    pub comm_seconds_per_epoch: Option<f64>,
    pub total_seconds_per_epoch: Option<f64>,
    pub comp_seconds: Option<f64>,
    pub comm_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub method: String,
    pub keep: Option<f64>,
    pub levels: Option<u32>,
    pub workers: usize,
    pub nominal_ratio: f64,
    pub runs: usize,
    pub mean_convergence_epoch: Option<f64>,
    pub stderr_convergence_epoch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamRow {
    pub method: String,
    pub cells: usize,
    pub lr_min: Option<f64>,
    pub lr_q1: Option<f64>,
    pub lr_median: Option<f64>,
    pub lr_q3: Option<f64>,
    pub lr_max: Option<f64>,
    pub dropout_min: Option<f64>,
    pub dropout_q1: Option<f64>,
    pub dropout_median: Option<f64>,
    pub dropout_q3: Option<f64>,
    pub dropout_max: Option<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Mean and standard error `s / sqrt(count)` with the sample standard deviation.
pub fn mean_and_stderr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt() / n.sqrt()))
}

type CellKey = (String, String, usize);

fn group_cells(rows: &[SweepRow]) -> BTreeMap<CellKey, Vec<&SweepRow>> {
    let mut cells: BTreeMap<CellKey, Vec<&SweepRow>> = BTreeMap::new();
    for row in rows {
        let setting = format!("{:?}/{:?}", row.keep, row.levels);
        cells
            .entry((row.method.clone(), setting, row.workers))
            .or_default()
            .push(row);
    }
    cells
}

pub fn perf_vs_ratio(rows: &[SweepRow]) -> Vec<PerfRow> {
    group_cells(rows)
        .into_values()
        .map(|cell| {
            let first = cell[0];
            let best = best_row(cell.iter().copied());
            PerfRow {
                method: first.method.clone(),
                keep: first.keep,
                levels: first.levels,
                workers: first.workers,
                nominal_ratio: first.nominal_ratio,
                runs: cell.len(),
                best_val_ce: best.and_then(|b| b.best_val_ce),
                best_val_ppl: best.and_then(|b| b.best_val_ppl),
                test_ce: best.and_then(|b| b.test_ce),
                test_ppl: best.and_then(|b| b.test_ppl),
                learning_rate: best.map(|b| b.learning_rate),
                dropout: best.and_then(|b| b.dropout),
            }
        })
        .collect()
}

pub fn time_stack(rows: &[SweepRow]) -> Vec<TimeRow> {
    group_cells(rows)
        .into_values()
        .map(|cell| {
            let first = cell[0];
            let best = best_row(cell.iter().copied());
            let comp = best.and_then(|b| b.comp_seconds_per_epoch);
            let comm = best.and_then(|b| b.comm_seconds_per_epoch);
            TimeRow {
                method: first.method.clone(),
                keep: first.keep,
                levels: first.levels,
                workers: first.workers,
                nominal_ratio: first.nominal_ratio,
                comp_seconds_per_epoch: comp,
                comm_seconds_per_epoch: comm,
                total_seconds_per_epoch: comp.zip(comm).map(|(a, b)| a + b),
                comp_seconds: best.map(|b| b.comp_seconds),
                comm_seconds: best.map(|b| b.comm_seconds),
            }
        })
        .collect()
}

pub fn convergence(rows: &[SweepRow]) -> Vec<ConvergenceRow> {
    group_cells(rows)
        .into_values()
        .map(|cell| {
            let first = cell[0];
            let epochs: Vec<f64> = cell
                .iter()
                .filter(|r| r.succeeded())
                .filter_map(|r| r.convergence_epoch.map(|e| e as f64))
                .collect();
            let stats = mean_and_stderr(&epochs);
            ConvergenceRow {
                method: first.method.clone(),
                keep: first.keep,
                levels: first.levels,
                workers: first.workers,
                nominal_ratio: first.nominal_ratio,
                runs: epochs.len(),
                mean_convergence_epoch: stats.map(|s| s.0),
                stderr_convergence_epoch: stats.map(|s| s.1),
            }
        })
        .collect()
}

pub fn hyperparam_dist(rows: &[SweepRow]) -> Vec<HyperparamRow> {
    let mut by_method: BTreeMap<String, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((method, _, _), cell) in group_cells(rows) {
        let entry = by_method.entry(method).or_default();
        entry.0 += 1;
        if let Some(best) = best_row(cell.iter().copied()) {
            entry.1.push(best.learning_rate);
            if let Some(p) = best.dropout {
                entry.2.push(p);
            }
        }
    }
    by_method
        .into_iter()
        .map(|(method, (cells, mut lrs, mut drops))| {
            lrs.sort_by(f64::total_cmp);
            drops.sort_by(f64::total_cmp);
            HyperparamRow {
                method,
                cells,
                lr_min: quantile(&lrs, 0.0),
                lr_q1: quantile(&lrs, 0.25),
                lr_median: quantile(&lrs, 0.5),
                lr_q3: quantile(&lrs, 0.75),
                lr_max: quantile(&lrs, 1.0),
                dropout_min: quantile(&drops, 0.0),
                dropout_q1: quantile(&drops, 0.25),
                dropout_median: quantile(&drops, 0.5),
                dropout_q3: quantile(&drops, 0.75),
                dropout_max: quantile(&drops, 1.0),
            }
        })
        .collect()
}

/// Writes the requested report for the sweeps in `dirs`; returns the row count.
pub fn cmd_aggregate(kind: ReportKind, dirs: &[PathBuf], out: &Path) -> Result<usize> {
    let rows = load_sweep_rows(dirs)?;
    match kind {
        ReportKind::PerfVsRatio => {
            let report = perf_vs_ratio(&rows);
            write_csv(out, &report)?;
            Ok(report.len())
        }
        ReportKind::TimeStack => {
            let report = time_stack(&rows);
            write_csv(out, &report)?;
            Ok(report.len())
        }
        ReportKind::Convergence => {
            let report = convergence(&rows);
            write_csv(out, &report)?;
            Ok(report.len())
        }
        ReportKind::HyperparamDist => {
            let report = hyperparam_dist(&rows);
            write_csv(out, &report)?;
            Ok(report.len())
        }
    }
}
