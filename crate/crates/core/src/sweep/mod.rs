//! The (init mode × reduction fraction × seed) experiment grid and its
//! aggregate tables.

mod rows;
mod tables;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};

use serde::{Deserialize, Serialize};

pub use rows::{format_sig9, quantize, ResultRow, RESULTS_HEADER};
pub use tables::{
    learning_curves, mean_improvement, mean_improvement_core, size_degradation, size_degradation_core,
    std_reduction, std_reduction_core, Aggregate, AggregateTables, CurvePoint, PerMetric,
};

use crate::datapipe::RebalanceConfig;
use crate::metrics::{self, MetricsReport};
use crate::neuralnet::{Architecture, Checkpoint};
use crate::synthfundus::{self, Dataset, TaskSpec, TrainRatio};
use crate::trainer::{self, InitMode, RunRecord, TrainConfig};
use crate::{seed, Error, Result};

/// Reduction fraction as an ordered key; fractions are non-negative, where
/// IEEE bit order matches numeric order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fraction(u64);

impl Fraction {
    pub fn new(f: f64) -> Self {
        Fraction((f + 0.0).to_bits())
    }

    pub fn value(self) -> f64 {
        f64::from_bits(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub mode: InitMode,
    pub fraction: Fraction,
    pub seed: u64,
}

impl CellKey {
    pub fn new(mode: InitMode, fraction: f64, seed: u64) -> Self {
        Self {
            mode,
            fraction: Fraction::new(fraction),
            seed,
        }
    }

    pub fn run_id(&self) -> String {
        format!(
            "{}_f{}_s{}",
            self.mode.name(),
            format_sig9(self.fraction.value()),
            self.seed
        )
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(mode={}, fraction={}, seed={})",
            self.mode,
            format_sig9(self.fraction.value()),
            self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub modes: Vec<InitMode>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub source: TaskSpec,
    pub target: TaskSpec,
    pub pretext: TaskSpec,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub train_ratio: TrainRatio,
    pub threshold: f64,
    /// Off by default: wall-clock times would make results.csv differ
    /// between otherwise identical runs. Timings are always logged.
    #[serde(default)]
    pub record_wall_time: bool,
}

/// `0.0, 0.1, …, 0.9`.
pub fn default_fractions() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

impl Default for SweepConfig {
    fn default() -> Self {
        let source = TaskSpec::source_dr();
        let target = TaskSpec::target_rop();
        let mut pretrain = TrainConfig::pretrain_default();
        pretrain.rebalance = RebalanceConfig::from_counts(source.negative_count, source.positive_count);
        let mut finetune = TrainConfig::finetune_default();
        finetune.rebalance = RebalanceConfig::from_counts(target.negative_count, target.positive_count);
        Self {
            modes: InitMode::ALL.to_vec(),
            fractions: default_fractions(),
            seeds: vec![0, 1, 2],
            source,
            target,
            pretext: TaskSpec::generic_pretext(),
            pretrain,
            finetune,
            train_ratio: TrainRatio::four_to_one(),
            threshold: metrics::DEFAULT_THRESHOLD,
            record_wall_time: false,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.modes.is_empty() {
            return bad("at least one init mode is required");
        }
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.modes.len() {
            return bad("init modes must be distinct");
        }
        if self.fractions.is_empty() {
            return bad("at least one reduction fraction is required");
        }
        if self.fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return bad("reduction fractions must lie in [0, 1)");
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("reduction fractions must be strictly ascending");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.source.task_id != synthfundus::TaskId::SourceDR
            || self.target.task_id != synthfundus::TaskId::TargetROP
            || self.pretext.task_id != synthfundus::TaskId::GenericPretext
        {
            return bad("task specs must be SourceDR, TargetROP and GenericPretext");
        }
        if self.source.image_size != self.target.image_size || self.pretext.image_size != self.target.image_size {
            return bad("all tasks must share one image size");
        }
        for spec in [&self.source, &self.target, &self.pretext] {
            spec.validate()?;
        }
        TrainRatio::new(self.train_ratio.num, self.train_ratio.den)?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    pub fn arch(&self) -> Architecture {
        Architecture::reference(self.target.image_size, 2)
    }

    /// Grid cells in canonical order: mode, then fraction, then seed.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &f in &self.fractions {
                for &s in &self.seeds {
                    out.push(CellKey::new(mode, f, s));
                }
            }
        }
        out
    }

    pub fn pretrained_modes(&self) -> Vec<InitMode> {
        self.modes
            .iter()
            .copied()
            .filter(|m| *m != InitMode::Direct)
            .collect()
    }

    pub fn task_for(&self, mode: InitMode) -> Option<&TaskSpec> {
        match mode {
            InitMode::Direct => None,
            InitMode::GenericPretrained => Some(&self.pretext),
            InitMode::SourcePretrained => Some(&self.source),
        }
    }

    /// Pretraining config for `mode` under sweep seed `seed`.
    pub fn pretrain_config(&self, seed_value: u64) -> TrainConfig {
        TrainConfig {
            seed: seed_value,
            ..self.pretrain.clone()
        }
    }

    pub fn finetune_config(&self, seed_value: u64) -> TrainConfig {
        TrainConfig {
            seed: seed_value,
            ..self.finetune.clone()
        }
    }
}

/// Fixed target data for a sweep.
#[derive(Clone, Debug)]
pub struct TargetData {
    pub train: Dataset,
    pub test: Dataset,
}

impl TargetData {
    pub fn generate(config: &SweepConfig) -> Result<Self> {
        let all = synthfundus::generate_dataset(&config.target)?;
        let (train, test) = synthfundus::split(&all, config.train_ratio, config.target.seed)?;
        Ok(Self { train, test })
    }
}

/// Source checkpoints keyed by (pretrained mode, seed).
pub type SourceCheckpoints = BTreeMap<(InitMode, u64), Checkpoint>;

/// Pretrains one checkpoint per pretrained mode per seed.
pub fn pretrain_all(config: &SweepConfig) -> Result<SourceCheckpoints> {
    let arch = config.arch();
    let mut out = BTreeMap::new();
    for mode in config.pretrained_modes() {
        let task = config.task_for(mode).expect("pretrained mode has a task");
        let train = trainer::source_train_split(task)?;
        for &s in &config.seeds {
            let ckpt = trainer::pretrain_on(&train, &arch, &config.pretrain_config(s))?.checkpoint;
            out.insert((mode, s), ckpt);
        }
    }
    Ok(out)
}

/// One evaluated grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub key: CellKey,
    pub record: RunRecord,
    pub metrics: MetricsReport,
    pub source_ckpt_hash: Option<String>,
}

impl CellResult {
    /// The persisted form of this cell.
    pub fn entry(&self, config: &SweepConfig) -> GridEntry {
        GridEntry {
            metrics: MetricValues::from(&self.metrics),
            train_size: self.record.train_size,
            epochs: self.record.config.epochs,
            wall_seconds: if config.record_wall_time {
                quantize(self.record.wall_seconds)
            } else {
                0.0
            },
            source_ckpt_hash: self.source_ckpt_hash.clone(),
        }
    }
}

/// The four metric values of one cell, as persisted in results.csv.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricValues {
    pub auroc: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
}

impl MetricValues {
    pub fn get(&self, m: metrics::Metric) -> Option<f64> {
        match m {
            metrics::Metric::Auroc => self.auroc,
            metrics::Metric::Accuracy => self.accuracy,
            metrics::Metric::Precision => self.precision,
            metrics::Metric::Sensitivity => self.sensitivity,
        }
    }

    pub fn undefined(&self) -> Vec<metrics::Metric> {
        metrics::Metric::ALL
            .into_iter()
            .filter(|&m| self.get(m).is_none())
            .collect()
    }
}

impl From<&MetricsReport> for MetricValues {
    fn from(r: &MetricsReport) -> Self {
        Self {
            auroc: r.auroc.map(quantize),
            accuracy: r.accuracy.map(quantize),
            precision: r.precision.map(quantize),
            sensitivity: r.sensitivity.map(quantize),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridEntry {
    pub metrics: MetricValues,
    pub train_size: usize,
    pub epochs: usize,
    pub wall_seconds: f64,
    pub source_ckpt_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub modes: Vec<InitMode>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub grid: BTreeMap<CellKey, GridEntry>,
    pub test_set_hash: String,
}

impl SweepResult {
    pub fn entry(&self, mode: InitMode, fraction: f64, seed_value: u64) -> Option<&GridEntry> {
        self.grid.get(&CellKey::new(mode, fraction, seed_value))
    }

    /// Cells of the configured cross product that are absent.
    pub fn missing(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &m in &self.modes {
            for &f in &self.fractions {
                for &s in &self.seeds {
                    let k = CellKey::new(m, f, s);
                    if !self.grid.contains_key(&k) {
                        out.push(k);
                    }
                }
            }
        }
        out
    }

    pub fn is_complete(&self) -> bool {
        self.grid.len() == self.modes.len() * self.fractions.len() * self.seeds.len()
            && self.missing().is_empty()
    }

    /// Per-seed values of `metric` for `mode` at `fraction`.
    pub fn values(&self, mode: InitMode, metric: metrics::Metric, fraction: f64) -> Vec<Option<f64>> {
        self.seeds
            .iter()
            .map(|&s| self.entry(mode, fraction, s).and_then(|e| e.metrics.get(metric)))
            .collect()
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        self.grid
            .iter()
            .map(|(k, e)| ResultRow::from_entry(k, e, &self.test_set_hash))
            .collect()
    }

    /// Rebuilds a result from parsed rows. Axes are taken from the rows,
    /// sorted, so an incomplete grid shows up in [`SweepResult::missing`].
    pub fn from_rows(rows: &[ResultRow]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("no result rows".into()))?;
        let test_set_hash = first.test_set_hash.clone();
        let mut modes = Vec::new();
        let mut fractions: Vec<f64> = Vec::new();
        let mut seeds = Vec::new();
        let mut grid = BTreeMap::new();
        for row in rows {
            if row.test_set_hash != test_set_hash {
                return Err(Error::InvalidArgument(format!(
                    "run {} was evaluated on a different test set",
                    row.run_id
                )));
            }
            let key = CellKey::new(row.init_mode, row.reduction_fraction, row.seed);
            if !modes.contains(&row.init_mode) {
                modes.push(row.init_mode);
            }
            if !fractions.iter().any(|f| f.to_bits() == row.reduction_fraction.to_bits()) {
                fractions.push(row.reduction_fraction);
            }
            if !seeds.contains(&row.seed) {
                seeds.push(row.seed);
            }
            if grid.insert(key, row.to_entry()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate result row for {key}")));
            }
        }
        modes.sort();
        fractions.sort_by(f64::total_cmp);
        seeds.sort_unstable();
        Ok(Self {
            modes,
            fractions,
            seeds,
            grid,
            test_set_hash,
        })
    }

    pub fn tables(&self) -> Result<AggregateTables> {
        AggregateTables::compute(self)
    }
}

/// Runs one cell: reduce, warm start, fine-tune, evaluate.
pub fn run_cell(
    config: &SweepConfig,
    data: &TargetData,
    sources: &SourceCheckpoints,
    key: CellKey,
) -> Result<CellResult> {
    let arch = config.arch();
    let source = match key.mode {
        InitMode::Direct => None,
        mode => Some(sources.get(&(mode, key.seed)).ok_or_else(|| {
            Error::InvalidArgument(format!("no source checkpoint for {mode} seed {}", key.seed))
        })?),
    };
    let cfg = config.finetune_config(key.seed);
    let record = trainer::finetune_target(&data.train, key.mode, source, &arch, &cfg, key.fraction.value())?;
    let metrics = metrics::evaluate(&arch, &record.checkpoint.params, &data.test, config.threshold)?;
    let source_ckpt_hash = source
        .map(|c| c.to_bytes().map(|b| seed::sha256_hex(&b)))
        .transpose()?;
    Ok(CellResult {
        key,
        record,
        metrics,
        source_ckpt_hash,
    })
}

/// Runs every cell with up to `jobs` worker threads. `on_cell` sees the
/// cells in canonical order regardless of completion order; the first
/// failure aborts the sweep and names its coordinate.
pub fn run_grid(
    config: &SweepConfig,
    data: &TargetData,
    sources: &SourceCheckpoints,
    jobs: usize,
    mut on_cell: impl FnMut(&CellResult) -> Result<()>,
) -> Result<SweepResult> {
    config.validate()?;
    let cells = config.cells();
    let test_set_hash = data.test.content_hash();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<CellResult>)>();
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let mut grid = BTreeMap::new();

    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            let tx = tx.clone();
            let (next, abort, cells) = (&next, &abort, &cells);
            scope.spawn(move || loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&key) = cells.get(i) else { break };
                let res = run_cell(config, data, sources, key).map_err(|e| Error::Cell {
                    coordinate: key.to_string(),
                    source: Box::new(e),
                });
                if tx.send((i, res)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, CellResult> = BTreeMap::new();
        let mut emitted = 0;
        for (i, res) in rx {
            match res {
                Ok(cell) => {
                    pending.insert(i, cell);
                }
                Err(e) => {
                    abort.store(true, Ordering::Relaxed);
                    first_error.lock().unwrap().get_or_insert(e);
                    break;
                }
            }
            while let Some(cell) = pending.remove(&emitted) {
                log::info!(
                    "{} auroc={:?} train_size={} ({:.1}s)",
                    cell.key,
                    cell.metrics.auroc,
                    cell.record.train_size,
                    cell.record.wall_seconds
                );
                if let Err(e) = on_cell(&cell) {
                    abort.store(true, Ordering::Relaxed);
                    first_error.lock().unwrap().get_or_insert(e);
                    break;
                }
                grid.insert(cell.key, cell.entry(config));
                emitted += 1;
            }
            if abort.load(Ordering::Relaxed) {
                break;
            }
        }
        abort.store(true, Ordering::Relaxed);
    });

    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let result = SweepResult {
        modes: config.modes.clone(),
        fractions: config.fractions.clone(),
        seeds: config.seeds.clone(),
        grid,
        test_set_hash,
    };
    if !result.is_complete() {
        return Err(Error::InvalidArgument(format!(
            "sweep incomplete, missing {} cells",
            result.missing().len()
        )));
    }
    Ok(result)
}

/// Generates data, pretrains every source checkpoint once per seed, and
/// runs the whole grid.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepResult> {
    config.validate()?;
    let data = TargetData::generate(config)?;
    let sources = pretrain_all(config)?;
    run_grid(config, &data, &sources, 1, |_| Ok(()))
}
