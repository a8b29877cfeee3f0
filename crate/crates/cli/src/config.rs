//! The experiment config file.
//!
//! A TOML document whose keys are overlaid on [`ExperimentConfig::default`],
//! so any subset of fields may be given. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use retina_xfer::datapipe::{AugmentConfig, RebalanceConfig};
use retina_xfer::sweep::{default_fractions, SweepConfig};
use retina_xfer::synthfundus::{self, TaskId, TaskSpec, TrainRatio};
use retina_xfer::trainer::{InitMode, TrainConfig};
use serde::{Deserialize, Serialize};

/// Bad config file, bad flag, or a config that fails validation. Maps to
/// exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl fmt::Display) -> anyhow::Error {
    ConfigError(msg.to_string()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory. `--out` takes precedence.
    pub out_dir: PathBuf,
    /// Side length shared by every task and by the network input.
    pub image_size: usize,
    pub source: BinaryTaskSection,
    pub target: BinaryTaskSection,
    pub pretext: PretextSection,
    pub pretrain: TrainSection,
    pub finetune: TrainSection,
    pub augment: AugmentSection,
    pub rebalance: RebalanceSection,
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryTaskSection {
    pub positive_count: usize,
    pub negative_count: usize,
    pub shared_feature_strength: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextSection {
    pub num_classes: usize,
    pub per_class_count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub brightness_range: [f64; 2],
    pub flip_probability: f64,
}

/// `r = "auto"` derives the ratio from each task's class counts; an integer
/// forces it for both pretraining and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RatioSetting {
    Fixed(u32),
    Named(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RebalanceSection {
    pub enabled: bool,
    pub r: RatioSetting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub modes: Vec<InitMode>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub train_ratio: [u64; 2],
    pub record_wall_time: bool,
}

impl BinaryTaskSection {
    fn from_spec(s: &TaskSpec) -> Self {
        Self {
            positive_count: s.positive_count,
            negative_count: s.negative_count,
            shared_feature_strength: s.shared_feature_strength,
            seed: s.seed,
        }
    }

    fn to_spec(&self, task_id: TaskId, image_size: usize) -> TaskSpec {
        TaskSpec {
            task_id,
            image_size,
            num_classes: 2,
            positive_count: self.positive_count,
            negative_count: self.negative_count,
            per_class_count: 0,
            shared_feature_strength: self.shared_feature_strength,
            seed: self.seed,
        }
    }
}

impl TrainSection {
    fn from_config(c: &TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
        }
    }

    fn to_config(&self, augment: AugmentConfig, rebalance: RebalanceConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            rebalance,
            augment,
            seed: 0,
        }
    }
}

impl RebalanceSection {
    fn for_task(&self, spec: &TaskSpec) -> anyhow::Result<RebalanceConfig> {
        let mut rb = RebalanceConfig::from_counts(spec.negative_count, spec.positive_count);
        rb.enabled = self.enabled;
        match &self.r {
            RatioSetting::Fixed(r) => rb.r = *r,
            RatioSetting::Named(s) if s == "auto" => {}
            RatioSetting::Named(s) => {
                return Err(config_err(format!("rebalance.r must be \"auto\" or an integer, got {s:?}")))
            }
        }
        Ok(rb)
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        let aug = sweep.finetune.augment;
        let pretext = TaskSpec::generic_pretext();
        Self {
            out_dir: PathBuf::from("run"),
            image_size: synthfundus::DEFAULT_IMAGE_SIZE,
            source: BinaryTaskSection::from_spec(&sweep.source),
            target: BinaryTaskSection::from_spec(&sweep.target),
            pretext: PretextSection {
                num_classes: pretext.num_classes,
                per_class_count: pretext.per_class_count,
                seed: pretext.seed,
            },
            pretrain: TrainSection::from_config(&sweep.pretrain),
            finetune: TrainSection::from_config(&sweep.finetune),
            augment: AugmentSection {
                brightness_range: aug.brightness_range,
                flip_probability: aug.flip_probability,
            },
            rebalance: RebalanceSection {
                enabled: true,
                r: RatioSetting::Named("auto".into()),
            },
            sweep: SweepSection {
                modes: InitMode::ALL.to_vec(),
                fractions: default_fractions(),
                seeds: sweep.seeds,
                threshold: sweep.threshold,
                train_ratio: [sweep.train_ratio.num, sweep.train_ratio.den],
                record_wall_time: false,
            },
        }
    }
}

/// Recursively lays `over` on top of `base`.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let over: toml::Table = toml::from_str(text).map_err(|e| config_err(format!("config syntax: {e}")))?;
        let mut value = toml::Value::try_from(Self::default()).expect("default config serializes");
        merge(&mut value, toml::Value::Table(over));
        let config: Self = value.try_into().map_err(|e| config_err(format!("config: {e}")))?;
        config.sweep_config()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Module-level configuration, validated.
    pub fn sweep_config(&self) -> anyhow::Result<SweepConfig> {
        let size = self.image_size;
        let source = self.source.to_spec(TaskId::SourceDR, size);
        let target = self.target.to_spec(TaskId::TargetROP, size);
        let pretext = TaskSpec {
            task_id: TaskId::GenericPretext,
            image_size: size,
            num_classes: self.pretext.num_classes,
            positive_count: 0,
            negative_count: 0,
            per_class_count: self.pretext.per_class_count,
            shared_feature_strength: 0.0,
            seed: self.pretext.seed,
        };
        let augment = AugmentConfig {
            brightness_range: self.augment.brightness_range,
            flip_probability: self.augment.flip_probability,
            output_size: size,
        };
        let [num, den] = self.sweep.train_ratio;
        let config = SweepConfig {
            modes: self.sweep.modes.clone(),
            fractions: self.sweep.fractions.clone(),
            seeds: self.sweep.seeds.clone(),
            pretrain: self.pretrain.to_config(augment, self.rebalance.for_task(&source)?),
            finetune: self.finetune.to_config(augment, self.rebalance.for_task(&target)?),
            source,
            target,
            pretext,
            train_ratio: TrainRatio { num, den },
            threshold: self.sweep.threshold,
            record_wall_time: self.sweep.record_wall_time,
        };
        config.validate().map_err(config_err)?;
        if !(0.0..=1.0).contains(&config.threshold) {
            return Err(config_err(format!("threshold {} outside [0, 1]", config.threshold)));
        }
        Ok(config)
    }
}
