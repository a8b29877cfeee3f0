//! Run-directory layout and the JSON records kept in it.

use std::path::{Path, PathBuf};

use anyhow::Context;
use retina_xfer::metrics::{Metric, MetricsReport};
use retina_xfer::trainer::{InitMode, TrainConfig};
use serde::{Deserialize, Serialize};

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn datasets_manifest(&self) -> PathBuf {
        self.datasets().join("manifest.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn source_checkpoint(&self, mode: InitMode, seed: u64) -> PathBuf {
        self.checkpoints().join(format!("{}_s{seed}.ckpt", mode.name()))
    }

    pub fn source_provenance(&self, mode: InitMode, seed: u64) -> PathBuf {
        self.checkpoints().join(format!("{}_s{seed}.json", mode.name()))
    }

    pub fn run_checkpoint(&self, run_id: &str) -> PathBuf {
        self.checkpoints().join("runs").join(format!("{run_id}.ckpt"))
    }

    pub fn run_record(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(format!("{run_id}.json"))
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn sweep_manifest(&self) -> PathBuf {
        self.root.join("sweep_manifest.json")
    }

    pub fn tables(&self) -> PathBuf {
        self.root.join("tables.csv")
    }

    pub fn plot(&self, metric: Metric) -> PathBuf {
        self.root.join("plots").join(format!("{}.svg", metric.name()))
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("run.log")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub count: usize,
    pub class_counts: Vec<usize>,
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub task_id: String,
    pub dir: String,
    pub count: usize,
    pub class_counts: Vec<usize>,
    /// Binary tasks only.
    pub positives: Option<usize>,
    pub content_hash: String,
    pub train: SplitEntry,
    pub test: SplitEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetsManifest {
    pub image_size: usize,
    pub datasets: Vec<DatasetEntry>,
}

impl DatasetsManifest {
    pub fn get(&self, task_id: &str) -> anyhow::Result<&DatasetEntry> {
        self.datasets
            .iter()
            .find(|d| d.task_id == task_id)
            .with_context(|| format!("datasets manifest has no {task_id} entry"))
    }
}

/// Sidecar of a pretrained source checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceProvenance {
    pub mode: InitMode,
    pub source_task: String,
    pub seed: u64,
    pub fingerprint: String,
    pub checkpoint_sha256: String,
    pub train_set_hash: String,
    pub config: TrainConfig,
    pub epoch_losses: Vec<f64>,
}

/// Per-cell record under `runs/`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecordFile {
    pub run_id: String,
    pub init_mode: InitMode,
    pub reduction_fraction: f64,
    pub seed: u64,
    pub train_size: usize,
    pub epochs: usize,
    pub head_replaced: bool,
    pub metrics: MetricsReport,
    pub epoch_losses: Vec<f64>,
    pub wall_seconds: f64,
    pub checkpoint_sha256: String,
    pub source_ckpt_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub config: crate::ExperimentConfig,
    pub grid_size: usize,
    pub modes: Vec<InitMode>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Task id → content hash, from the datasets manifest.
    pub dataset_hashes: std::collections::BTreeMap<String, String>,
    pub train_set_hash: String,
    pub test_set_hash: String,
    /// `<mode>_s<seed>` → checkpoint SHA-256.
    pub source_checkpoints: std::collections::BTreeMap<String, String>,
    pub results_sha256: String,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
