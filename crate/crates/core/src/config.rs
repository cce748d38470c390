//! Experiment configuration: one JSON document with namespaced sections,
//! adjustable through dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::cifar::{self, Variant};
use crate::data::synthetic::{synthetic_splits, Family, SyntheticConfig};
use crate::data::Splits;
use crate::dynamic::DynamicConfig;
use crate::error::{Error, Result};
use crate::flops::Convention;
use crate::link::{ChannelKind, ChannelSpec};
use crate::pipeline::ModelKind;
use crate::static_model::{Depth, StaticConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub classes: usize,
    /// Upper end of the per-sample pixel noise level.
    pub noise: f64,
    pub jitter: usize,
    /// Synthetic image family.
    pub family: Family,
    /// CIFAR root; falls back to the data-directory environment variable.
    pub dir: Option<PathBuf>,
    /// Seed for the synthetic draw; each trial seed is added to it.
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            n_train: 1000,
            n_val: 1000,
            n_test: 1000,
            size: 16,
            classes: 4,
            noise: 0.6,
            jitter: 1,
            family: Family::Shapes,
            dir: None,
            seed: 0,
        }
    }
}

impl DatasetSection {
    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n: self.n_train,
            size: self.size,
            classes: self.classes,
            noise: self.noise,
            jitter: self.jitter,
            family: self.family,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            DatasetKind::Synthetic => self.classes,
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            DatasetKind::Synthetic => vec![1, self.size, self.size],
            _ => vec![3, cifar::SIDE, cifar::SIDE],
        }
    }

    /// Loads or renders the splits for one trial seed.
    pub fn load(&self, trial: u64) -> Result<Splits> {
        match self.kind {
            DatasetKind::Synthetic => synthetic_splits(
                &self.synthetic(),
                self.n_train,
                self.n_val,
                self.n_test,
                self.seed.wrapping_add(trial),
            ),
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
                let variant = if self.kind == DatasetKind::Cifar10 { Variant::Cifar10 } else { Variant::Cifar100 };
                let dir = cifar::data_dir(self.dir.as_deref())?;
                cifar::load_cifar(&dir, variant, self.n_val)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelSection {
    pub kinds: Vec<ChannelKind>,
    pub psnr_db: Vec<f64>,
    /// Also train and score a noiseless-channel model per seed.
    pub noiseless: bool,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            kinds: vec![ChannelKind::Awgn],
            psnr_db: vec![0.0, 18.0],
            noiseless: false,
        }
    }
}

impl ChannelSection {
    /// Every channel of the grid, the noiseless one last.
    pub fn grid(&self) -> Vec<ChannelSpec> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            if kind == ChannelKind::Noiseless {
                out.push(ChannelSpec::noiseless());
                continue;
            }
            for &p in &self.psnr_db {
                out.push(if kind == ChannelKind::Rayleigh {
                    ChannelSpec::rayleigh(p)
                } else {
                    ChannelSpec::awgn(p)
                });
            }
        }
        if self.noiseless && !out.iter().any(|c| c.kind == ChannelKind::Noiseless) {
            out.push(ChannelSpec::noiseless());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaticSection {
    pub depth: Depth,
}

impl Default for StaticSection {
    fn default() -> Self {
        Self { depth: Depth::Tiny8 }
    }
}

/// Encoder layout; classes, input shape and channel come from the other sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicSection {
    pub scales: usize,
    pub exits: usize,
    pub growth: usize,
    pub blocks: usize,
    pub tau: Vec<usize>,
    pub iota: Vec<f64>,
    pub bottleneck: usize,
    pub initial_channels: usize,
}

impl Default for DynamicSection {
    fn default() -> Self {
        Self::from(&DynamicConfig::desk(2, ChannelSpec::noiseless()))
    }
}

impl From<&DynamicConfig> for DynamicSection {
    fn from(c: &DynamicConfig) -> Self {
        Self {
            scales: c.scales,
            exits: c.exits,
            growth: c.growth,
            blocks: c.blocks,
            tau: c.tau.clone(),
            iota: c.iota.clone(),
            bottleneck: c.bottleneck,
            initial_channels: c.initial_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    /// Absolute budgets for the test batch; overrides `budget_points`.
    pub budgets: Vec<f64>,
    /// Evenly spaced budgets over `[N C_1, N C_K]`; 0 for none.
    pub budget_points: usize,
    pub workers: usize,
    pub convention: Convention,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            budgets: Vec::new(),
            budget_points: 0,
            workers: 1,
            convention: Convention::AllLayers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelKind,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default, rename = "static")]
    pub static_model: StaticSection,
    #[serde(default)]
    pub dynamic: DynamicSection,
    #[serde(default = "TrainConfig::table_static")]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: [&str; 3] = ["synthetic-static", "synthetic-dynamic", "cifar10-dynamic"];

/// Constant-lr settings the desk presets train with.
fn desk_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr: 0.01,
        weight_decay: 5e-4,
        precise_bn_batches: 16,
        ..TrainConfig::table_static()
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "synthetic-static" => Ok(Self {
                name: name.into(),
                model: ModelKind::Static,
                dataset: DatasetSection::default(),
                channel: ChannelSection {
                    kinds: vec![ChannelKind::Awgn],
                    psnr_db: vec![0.0, 18.0],
                    noiseless: true,
                },
                static_model: StaticSection::default(),
                dynamic: DynamicSection::default(),
                train: desk_train(12),
                sweep: SweepSection {
                    seeds: (0..5).collect(),
                    ..SweepSection::default()
                },
                output: PathBuf::from("runs/synthetic-static"),
            }),
            "synthetic-dynamic" => Ok(Self {
                name: name.into(),
                model: ModelKind::Dynamic,
                dataset: DatasetSection {
                    n_train: 1500,
                    noise: 1.0,
                    family: Family::Pairs,
                    ..DatasetSection::default()
                },
                channel: ChannelSection {
                    kinds: vec![ChannelKind::Awgn],
                    psnr_db: vec![12.0],
                    noiseless: false,
                },
                static_model: StaticSection::default(),
                dynamic: DynamicSection::default(),
                train: desk_train(15),
                sweep: SweepSection {
                    seeds: (0..5).collect(),
                    budget_points: 6,
                    ..SweepSection::default()
                },
                output: PathBuf::from("runs/synthetic-dynamic"),
            }),
            "cifar10-dynamic" => Ok(Self {
                name: name.into(),
                model: ModelKind::Dynamic,
                dataset: DatasetSection {
                    kind: DatasetKind::Cifar10,
                    n_val: 5000,
                    ..DatasetSection::default()
                },
                channel: ChannelSection {
                    kinds: vec![ChannelKind::Awgn],
                    psnr_db: vec![0.0, 6.0, 12.0, 18.0],
                    noiseless: true,
                },
                static_model: StaticSection::default(),
                dynamic: DynamicSection::from(&DynamicConfig::cifar(10, ChannelSpec::noiseless())),
                train: TrainConfig {
                    augment_pad: 4,
                    ..TrainConfig::table_dynamic()
                },
                sweep: SweepSection {
                    seeds: (0..5).collect(),
                    budget_points: 5,
                    ..SweepSection::default()
                },
                output: PathBuf::from("runs/cifar10-dynamic"),
            }),
            _ => Err(Error::Config(format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key=value` overrides such as `train.epochs=3` or
    /// `channel.psnr_db=[0,6]`. Values parse as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(&self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key.trim(), value)?;
        }
        Ok(serde_json::from_value(doc)?)
    }

    pub fn static_config(&self, channel: ChannelSpec) -> StaticConfig {
        StaticConfig {
            depth: self.static_model.depth,
            num_classes: self.dataset.num_classes(),
            input_shape: self.dataset.input_shape(),
            channel,
        }
    }

    pub fn dynamic_config(&self, channel: ChannelSpec) -> DynamicConfig {
        let d = &self.dynamic;
        DynamicConfig {
            scales: d.scales,
            exits: d.exits,
            growth: d.growth,
            blocks: d.blocks,
            tau: d.tau.clone(),
            iota: d.iota.clone(),
            bottleneck: d.bottleneck,
            initial_channels: d.initial_channels,
            num_classes: self.dataset.num_classes(),
            input_shape: self.dataset.input_shape(),
            channel,
            convention: self.sweep.convention,
        }
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config section in `{key}`")))?;
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for p in PRESETS {
            let c = ExperimentConfig::preset(p).unwrap();
            assert_eq!(ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        }
        assert!(ExperimentConfig::preset("imagenet").is_err());
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::preset("synthetic-dynamic")
            .unwrap()
            .with_overrides(&["train.epochs=2", "channel.psnr_db=[0,6]", "static.depth=resnet20", "name=x"])
            .unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.channel.psnr_db, vec![0.0, 6.0]);
        assert_eq!(c.static_model.depth, Depth::ResNet(20));
        assert_eq!(c.name, "x");
        let base = ExperimentConfig::preset("synthetic-static").unwrap();
        assert!(base.clone().with_overrides(&["train.nope=1"]).is_err());
        assert!(base.clone().with_overrides(&["train.epochs"]).is_err());
        assert!(base.with_overrides(&["train.epochs=\"many\""]).is_err());
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let c = ExperimentConfig::from_json(r#"{"name": "t", "model": "static"}"#).unwrap();
        assert_eq!(c.dataset, DatasetSection::default());
        assert!(ExperimentConfig::from_json(r#"{"name": "t", "model": "static", "extra": 1}"#).is_err());
    }

    #[test]
    fn channel_grid_appends_noiseless() {
        let s = ChannelSection {
            kinds: vec![ChannelKind::Awgn, ChannelKind::Rayleigh],
            psnr_db: vec![0.0, 18.0],
            noiseless: true,
        };
        let g = s.grid();
        assert_eq!(g.len(), 5);
        assert_eq!(g[4].kind, ChannelKind::Noiseless);
    }
}
