//! Experiment configuration as one TOML document.
//!
//! Every table has defaults, so an empty file describes the desk-scale
//! setup: procedural shapes at 16x16, a three-block CNN, class 0 forgotten,
//! seeds 0..3. The fingerprint is a SHA-256 prefix of the canonical TOML
//! re-serialization, so formatting and key order in the source file do not
//! change it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BaselineSpec, Method};
use crate::dataset::hex_prefix;
use crate::dataset::{cifar, packed, shapes};
use crate::error::{Error, Result};
use crate::forgetting::Strategy;
use crate::inversion::InversionConfig;
use crate::metrics::RelearnConfig;
use crate::navigation::{CovarNavConfig, DescentConfig};
use crate::nn::{Architecture, LrSchedule, TrainConfig};
use crate::projection::ProjectionConfig;

/// Environment variable naming the directory that relative dataset roots
/// resolve against.
pub const DATA_ROOT_ENV: &str = "UNLEARN_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Procedural shapes generated in memory.
    Shapes,
    /// CIFAR-10 binary batches under `root`.
    Cifar10,
    /// `root/train/<class>/*` and `root/test/<class>/*`.
    ImageDir,
    /// Packed arrays `root/train.{bin,json}` and `root/test.{bin,json}`.
    Packed,
}

impl DatasetKind {
    pub fn id(self) -> &'static str {
        match self {
            DatasetKind::Shapes => "shapes",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::ImageDir => "image_dir",
            DatasetKind::Packed => "packed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Name used in the results layout; defaults to the kind.
    pub name: Option<String>,
    pub root: Option<PathBuf>,
    /// Per-class caps; `None` keeps everything (file-backed kinds only).
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Shapes,
            name: None,
            root: None,
            train_per_class: Some(500),
            test_per_class: Some(100),
            image_size: 16,
            noise_std: shapes::ShapesSpec::default().noise_std,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.id().to_string())
    }

    /// The dataset directory: `root` if absolute, else `root` under the
    /// environment data root (or the working directory).
    pub fn resolved_root(&self) -> Option<PathBuf> {
        let env = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        match (&self.root, env) {
            (Some(r), Some(base)) if r.is_relative() => Some(base.join(r)),
            (Some(r), _) => Some(r.clone()),
            (None, base) => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each conv block.
    pub widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { widths: vec![16, 32, 128] }
    }
}

/// Where the projection covariances come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxySource {
    /// Model-inverted images, no training data needed.
    Inverted,
    /// Real retained samples, as many per class as the inversion would make.
    Retained,
}

impl ProxySource {
    pub fn id(self) -> &'static str {
        match self {
            ProxySource::Inverted => "inverted",
            ProxySource::Retained => "retained",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub proxy: ProxySource,
    /// One of the objective methods; its strategy drives the forgetting loss.
    pub objective: Method,
    pub projection: ProjectionConfig,
    pub descent: DescentConfig,
    pub refresh_every: usize,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            proxy: ProxySource::Inverted,
            objective: Method::LargestWrongLogit,
            projection: ProjectionConfig::default(),
            descent: DescentConfig {
                lr: 0.05,
                epochs: 25,
                batch_size: 64,
                ..Default::default()
            },
            refresh_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_l2: f64,
    pub epsilon: f64,
    pub finetune_lr_factor: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let spec = BaselineSpec::default();
        Self {
            lr: spec.lr,
            epochs: spec.epochs,
            batch_size: spec.batch_size,
            lambda_l2: spec.lambda_l2,
            epsilon: spec.epsilon,
            finetune_lr_factor: spec.finetune_lr_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub sources: Vec<ProxySource>,
    pub objectives: Vec<Method>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            sources: vec![ProxySource::Retained, ProxySource::Inverted],
            objectives: vec![
                Method::MaxEntropy,
                Method::RandomLabels,
                Method::BoundaryShrink,
                Method::LargestWrongLogit,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub forget_class: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Whether methods may read the retained training set.
    pub retain_access: bool,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inversion: InversionConfig,
    pub unlearn: UnlearnConfig,
    pub baseline: BaselineConfig,
    pub relearn: RelearnConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            forget_class: 0,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("results"),
            retain_access: true,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 15,
                batch_size: 64,
                lr: 0.05,
                schedule: LrSchedule::Cosine,
                ..Default::default()
            },
            inversion: InversionConfig {
                samples_per_class: 10,
                batch_size: 90,
                steps: 300,
                lr: 0.05,
                ..Default::default()
            },
            unlearn: UnlearnConfig::default(),
            baseline: BaselineConfig::default(),
            relearn: RelearnConfig {
                lr: 0.05,
                ..Default::default()
            },
            ablation: AblationConfig::default(),
        }
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Keys missing from `text` take the desk-scale values of
    /// [`ExperimentConfig::default`], including keys inside tables that are
    /// only partly given.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        overlay(&mut merged, user);
        merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Canonical serialization: every field, in declaration order.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex_prefix(&Sha256::digest(self.to_toml()?.as_bytes()), 16))
    }

    /// Number of classes the configured dataset provides. Reads index files
    /// or directory listings, not the images.
    pub fn num_classes(&self) -> Result<usize> {
        match self.dataset.kind {
            DatasetKind::Shapes => Ok(shapes::NUM_CLASSES),
            DatasetKind::Cifar10 => Ok(cifar::CLASS_NAMES.len()),
            DatasetKind::ImageDir => {
                let dir = self.require_root()?.join("train");
                let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
                Ok(entries.filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).count())
            }
            DatasetKind::Packed => Ok(packed::read_index(&self.require_root()?.join("train"))?.num_classes),
        }
    }

    pub(crate) fn require_root(&self) -> Result<PathBuf> {
        self.dataset.resolved_root().ok_or_else(|| {
            Error::Config(format!(
                "dataset kind `{}` needs `dataset.root` or ${DATA_ROOT_ENV}",
                self.dataset.kind.id()
            ))
        })
    }

    fn check_paths(&self) -> Result<()> {
        let required: Vec<PathBuf> = match self.dataset.kind {
            DatasetKind::Shapes => return Ok(()),
            DatasetKind::Cifar10 => {
                let root = self.require_root()?;
                (1..=5)
                    .map(|i| root.join(format!("data_batch_{i}.bin")))
                    .chain([root.join("test_batch.bin")])
                    .collect()
            }
            DatasetKind::ImageDir => {
                let root = self.require_root()?;
                vec![root.join("train"), root.join("test")]
            }
            DatasetKind::Packed => {
                let root = self.require_root()?;
                ["train", "test"]
                    .iter()
                    .flat_map(|s| {
                        let (bin, json) = packed::paths(&root.join(s));
                        [bin, json]
                    })
                    .collect()
            }
        };
        match required.iter().find(|p| !p.exists()) {
            Some(missing) => Err(Error::Config(format!("dataset path {} does not exist", missing.display()))),
            None => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return bad("`seeds` is empty".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("`seeds` has duplicates".into());
        }
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            return bad("`model.widths` needs at least one positive width".into());
        }
        if self.dataset.kind == DatasetKind::Shapes {
            if self.dataset.image_size < 4 {
                return bad("`dataset.image_size` must be at least 4".into());
            }
            if self.dataset.train_per_class.unwrap_or(0) == 0 || self.dataset.test_per_class.unwrap_or(0) == 0 {
                return bad("shapes needs positive `train_per_class` and `test_per_class`".into());
            }
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return bad("`train` needs a positive batch size and learning rate".into());
        }
        self.check_paths()?;
        let k = self.num_classes()?;
        if self.forget_class >= k {
            return bad(format!("forget_class {} is not a class index (K = {k})", self.forget_class));
        }
        self.inversion_config(0).validate(k).map_err(|e| Error::Config(format!("inversion: {e}")))?;
        self.unlearn.projection.validate().map_err(|e| Error::Config(format!("unlearn.projection: {e}")))?;
        self.unlearn.descent.validate().map_err(|e| Error::Config(format!("unlearn.descent: {e}")))?;
        if self.unlearn.objective.strategy(0.0).is_none() {
            return bad(format!("unlearn.objective `{}` is not a forgetting objective", self.unlearn.objective));
        }
        if let Some(m) = self.ablation.objectives.iter().find(|m| m.strategy(0.0).is_none()) {
            return bad(format!("ablation objective `{m}` is not a forgetting objective"));
        }
        if !self.retain_access && self.unlearn.proxy == ProxySource::Retained {
            return bad("unlearn.proxy = \"retained\" needs retain_access".into());
        }
        if !(self.relearn.alpha > 0.0 && self.relearn.alpha < 1.0) {
            return bad(format!("relearn.alpha must lie in (0, 1), got {}", self.relearn.alpha));
        }
        Ok(())
    }

    pub fn architecture(&self, input_shape: [usize; 3], num_classes: usize) -> Result<Architecture> {
        Architecture::desk_cnn(input_shape, &self.model.widths, num_classes)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    pub fn inversion_config(&self, seed: u64) -> InversionConfig {
        InversionConfig {
            forget_class: self.forget_class,
            seed,
            ..self.inversion.clone()
        }
    }

    pub fn strategy_of(&self, objective: Method) -> Result<Strategy> {
        objective
            .strategy(self.baseline.epsilon)
            .ok_or_else(|| Error::Config(format!("`{objective}` is not a forgetting objective")))
    }

    pub fn covarnav_config(&self, seed: u64) -> Result<CovarNavConfig> {
        Ok(CovarNavConfig {
            projection: self.unlearn.projection.clone(),
            descent: self.unlearn.descent.clone(),
            strategy: self.strategy_of(self.unlearn.objective)?,
            inversion: self.inversion_config(seed),
            refresh_every: self.unlearn.refresh_every,
            seed,
        })
    }

    pub fn baseline_spec(&self, method: Method, seed: u64) -> BaselineSpec {
        let b = &self.baseline;
        BaselineSpec {
            method,
            lr: b.lr,
            epochs: b.epochs,
            batch_size: b.batch_size,
            lambda_l2: b.lambda_l2,
            epsilon: b.epsilon,
            finetune_lr_factor: b.finetune_lr_factor,
            train: self.train_config(seed),
            seed,
        }
    }

    pub fn relearn_config(&self, seed: u64) -> RelearnConfig {
        RelearnConfig { seed, ..self.relearn.clone() }
    }
}
