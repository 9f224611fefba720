//! Configured runs and their on-disk results.
//!
//! Layout under `<output_dir>/<dataset>/`:
//!
//! ```text
//! original/<seed>/checkpoints/model.ckpt   trained model
//! original/<seed>/train_log.json
//! inversion/<seed>/proxy.{bin,json}        inverted proxy set
//! inversion/<seed>/inversion.json
//! scratch/<seed>/checkpoints/model.ckpt    retrained reference for AIN
//! <method>/<seed>/report.json
//! <method>/<seed>/checkpoints/model.ckpt
//! <method>/aggregate.json
//! ablation/table.json
//! ```
//!
//! Every file carries the config fingerprint: checkpoints and packed arrays
//! in their header metadata, JSON files as a `config_fingerprint` field.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{run_baseline, run_baseline_with_projection, Method};
use crate::config::{DatasetKind, ExperimentConfig, ProxySource};
use crate::dataset::packed::{self, DType, Extras};
use crate::dataset::shapes::{self, ShapesSpec};
use crate::dataset::{cifar, image_dir, LabeledDataset, Partition, Splits};
use crate::embedding::{self, EmbeddingExport};
use crate::error::{Error, Result};
use crate::inversion::{invert, SyntheticDataset};
use crate::metrics::{accuracy, aggregate, evaluate, relearn_time, AggregateReport, RelearnTime, RunSummary, UnlearningReport};
use crate::navigation::{covarnav_unlearn, Unlearned};
use crate::nn::checkpoint;
use crate::nn::{train_original, ModelSnapshot, TrainLog};

/// A method name as used on the command line and in the results layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodId {
    CovarNav,
    Baseline(Method),
    /// An objective baseline run through the projected loop.
    Projected(Method),
}

impl MethodId {
    pub fn needs_retained(self) -> bool {
        matches!(self, MethodId::Baseline(m) if m.needs_retained())
    }

    pub fn all() -> Vec<MethodId> {
        let mut v = vec![MethodId::CovarNav];
        v.extend(Method::ALL.into_iter().map(MethodId::Baseline));
        v.extend(
            Method::ALL
                .into_iter()
                .filter(|m| m.strategy(0.0).is_some())
                .map(MethodId::Projected),
        );
        v
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodId::CovarNav => f.write_str("covarnav"),
            MethodId::Baseline(m) => write!(f, "{m}"),
            MethodId::Projected(m) => write!(f, "{m}+projection"),
        }
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "covarnav" {
            return Ok(MethodId::CovarNav);
        }
        if let Some(base) = s.strip_suffix("+projection") {
            let m: Method = base.parse()?;
            if m.strategy(0.0).is_none() {
                return Err(Error::InvalidArgument(format!("`{m}` has no projected variant")));
            }
            return Ok(MethodId::Projected(m));
        }
        s.parse().map(MethodId::Baseline)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            root: config.output_dir.join(config.dataset.name()),
        }
    }

    pub fn run_dir(&self, method: &str, seed: u64) -> PathBuf {
        self.root.join(method).join(seed.to_string())
    }

    pub fn report(&self, method: &str, seed: u64) -> PathBuf {
        self.run_dir(method, seed).join("report.json")
    }

    pub fn checkpoint(&self, method: &str, seed: u64) -> PathBuf {
        self.run_dir(method, seed).join("checkpoints").join("model.ckpt")
    }

    pub fn original_checkpoint(&self, seed: u64) -> PathBuf {
        self.checkpoint("original", seed)
    }

    pub fn train_log(&self, seed: u64) -> PathBuf {
        self.run_dir("original", seed).join("train_log.json")
    }

    pub fn proxy_stem(&self, seed: u64) -> PathBuf {
        self.run_dir("inversion", seed).join("proxy")
    }

    pub fn inversion_log(&self, seed: u64) -> PathBuf {
        self.run_dir("inversion", seed).join("inversion.json")
    }

    pub fn scratch_checkpoint(&self, seed: u64) -> PathBuf {
        self.checkpoint("scratch", seed)
    }

    pub fn aggregate(&self, method: &str) -> PathBuf {
        self.root.join(method).join("aggregate.json")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation").join("table.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `covariance_source` or `objective`.
    pub group: String,
    pub setting: String,
    pub summary: AggregateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_fingerprint: String,
    pub rows: Vec<AblationRow>,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub model: ModelSnapshot,
    pub log: TrainLog,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    pub layout: Layout,
    data: OnceLock<(LabeledDataset, LabeledDataset)>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<UnlearningReport> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

impl Experiment {
    /// Validates the config and fixes its fingerprint.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            fingerprint: config.fingerprint()?,
            layout: Layout::new(&config),
            config,
            data: OnceLock::new(),
        })
    }

    fn metadata(&self, seed: u64) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_fingerprint".to_string(), self.fingerprint.clone()),
            ("seed".to_string(), seed.to_string()),
        ])
    }

    /// Train and test sets, loaded once.
    pub fn data(&self) -> Result<&(LabeledDataset, LabeledDataset)> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let loaded = self.load_data()?;
        Ok(self.data.get_or_init(|| loaded))
    }

    fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let d = &self.config.dataset;
        let cap = |ds: LabeledDataset, n: Option<usize>| match n {
            Some(n) => ds.first_per_class(n),
            None => ds,
        };
        match d.kind {
            DatasetKind::Shapes => {
                let spec = ShapesSpec {
                    image_size: d.image_size,
                    noise_std: d.noise_std,
                };
                shapes::train_test(
                    spec,
                    d.train_per_class.unwrap_or(0),
                    d.test_per_class.unwrap_or(0),
                    d.seed,
                )
            }
            DatasetKind::Cifar10 => cifar::load(&self.config.require_root()?, d.train_per_class, d.test_per_class),
            DatasetKind::ImageDir => {
                let root = self.config.require_root()?;
                Ok((
                    cap(image_dir::load(&root.join("train"), Partition::Train)?, d.train_per_class),
                    cap(image_dir::load(&root.join("test"), Partition::Test)?, d.test_per_class),
                ))
            }
            DatasetKind::Packed => {
                let root = self.config.require_root()?;
                let (mut train, _) = packed::read(&root.join("train"))?;
                let (mut test, _) = packed::read(&root.join("test"))?;
                train.partition = Partition::Train;
                test.partition = Partition::Test;
                Ok((cap(train, d.train_per_class), cap(test, d.test_per_class)))
            }
        }
    }

    pub fn splits(&self) -> Result<Splits> {
        let (train, test) = self.data()?;
        Splits::new(train, test, self.config.forget_class)
    }

    /// Trains the original model for `seed` and persists it with its log.
    pub fn train(&self, seed: u64) -> Result<TrainOutcome> {
        let (train, _) = self.data()?;
        let arch = self.config.architecture(train.image_shape(), train.num_classes)?;
        let (model, log) = train_original(arch, train, &self.config.train_config(seed))?;
        let path = self.layout.original_checkpoint(seed);
        checkpoint::save_with(&model, &path, &self.metadata(seed))?;
        write_json(
            &self.layout.train_log(seed),
            &json!({ "config_fingerprint": self.fingerprint, "seed": seed, "log": log }),
        )?;
        Ok(TrainOutcome {
            checkpoint: path,
            model,
            log,
        })
    }

    /// The trained model for `seed`; `train` must have run.
    pub fn original(&self, seed: u64) -> Result<ModelSnapshot> {
        let path = self.layout.original_checkpoint(seed);
        if !path.exists() {
            return Err(Error::Config(format!(
                "no trained model at {}; run `train` for seed {seed} first",
                path.display()
            )));
        }
        checkpoint::load(&path)
    }

    /// Inverts a proxy set from the original model and persists it.
    pub fn invert(&self, seed: u64) -> Result<SyntheticDataset> {
        let model = self.original(seed)?;
        let syn = invert(&model, &self.config.inversion_config(seed))?;
        let meta = self.metadata(seed);
        packed::write_with(
            &syn.dataset,
            &self.layout.proxy_stem(seed),
            DType::F64,
            Extras {
                metadata: Some(&meta),
                ..Default::default()
            },
        )?;
        write_json(
            &self.layout.inversion_log(seed),
            &json!({
                "config_fingerprint": self.fingerprint,
                "seed": seed,
                "samples": syn.dataset.len(),
                "quality": syn.quality,
                "initial_confidence": syn.initial_confidence,
                "final_confidence": syn.final_confidence,
                "trajectory": syn.trajectory,
            }),
        )?;
        Ok(syn)
    }

    /// The persisted proxy for `seed` if it was made under this config.
    pub fn stored_proxy(&self, seed: u64) -> Result<Option<LabeledDataset>> {
        let stem = self.layout.proxy_stem(seed);
        if !packed::paths(&stem).1.exists() {
            return Ok(None);
        }
        let index = packed::read_index(&stem)?;
        if index.metadata.get("config_fingerprint") != Some(&self.fingerprint) {
            return Ok(None);
        }
        Ok(Some(packed::read(&stem)?.0))
    }

    /// Covariance data for `source`. Inverted proxies are reused from disk
    /// when present and made (and stored) otherwise.
    pub fn proxy(&self, seed: u64, source: ProxySource, splits: &Splits) -> Result<LabeledDataset> {
        match source {
            ProxySource::Inverted => match self.stored_proxy(seed)? {
                Some(d) => Ok(d),
                None => Ok(self.invert(seed)?.dataset),
            },
            ProxySource::Retained => {
                if !self.config.retain_access {
                    return Err(Error::RetainedAccessRequired {
                        method: "covariance from the retained set".into(),
                    });
                }
                Ok(splits
                    .retain
                    .per_class_subsample(self.config.inversion.samples_per_class, seed, Partition::Proxy))
            }
        }
    }

    fn run_method(
        &self,
        method: MethodId,
        seed: u64,
        original: &ModelSnapshot,
        splits: &Splits,
        source: ProxySource,
        objective: Method,
    ) -> Result<Unlearned> {
        if method.needs_retained() && !self.config.retain_access {
            return Err(Error::RetainedAccessRequired {
                method: method.to_string(),
            });
        }
        let mut out = match method {
            MethodId::CovarNav => {
                let proxy = self.proxy(seed, source, splits)?;
                let mut cfg = self.config.covarnav_config(seed)?;
                cfg.strategy = self.config.strategy_of(objective)?;
                let mut out = covarnav_unlearn(original, &splits.forget, Some(&proxy), &cfg)?;
                out.summary.details["proxy"]["source"] = source.id().into();
                out
            }
            MethodId::Baseline(m) => {
                let retained = m.needs_retained().then_some(&splits.retain);
                run_baseline(&self.config.baseline_spec(m, seed), original, &splits.forget, retained)?
            }
            MethodId::Projected(m) => {
                let proxy = self.proxy(seed, source, splits)?;
                let mut out = run_baseline_with_projection(
                    &self.config.baseline_spec(m, seed),
                    original,
                    &splits.forget,
                    Some(&proxy),
                    &self.config.covarnav_config(seed)?,
                )?;
                out.summary.details["proxy"]["source"] = source.id().into();
                out
            }
        };
        out.summary.details["dataset"] = self.config.dataset.name().into();
        out.summary.details["forget_class"] = self.config.forget_class.into();
        out.summary.details["retain_access"] = self.config.retain_access.into();
        Ok(out)
    }

    /// Runs `method` on the original model for `seed`, writes the report and
    /// the unlearned checkpoint, and returns the report.
    pub fn unlearn(&self, method: MethodId, seed: u64, with_relearn: bool) -> Result<UnlearningReport> {
        let name = method.to_string();
        if method.needs_retained() && !self.config.retain_access {
            return Err(Error::RetainedAccessRequired { method: name });
        }
        let splits = self.splits()?;
        let original = self.original(seed)?;
        let out = self.run_method(method, seed, &original, &splits, self.config.unlearn.proxy, self.config.unlearn.objective)?;
        let mut report = evaluate(&original, &out.model, &splits, &out.summary, seed, &self.fingerprint)?;
        if with_relearn {
            self.attach_relearn(&mut report, &original, &out.model, &splits, seed)?;
        }
        checkpoint::save_with(&out.model, &self.layout.checkpoint(&name, seed), &self.metadata(seed))?;
        write_json(&self.layout.report(&name, seed), &report)?;
        Ok(report)
    }

    /// The reference model trained from scratch on the retained set, cached
    /// per seed.
    pub fn scratch(&self, seed: u64, splits: &Splits) -> Result<ModelSnapshot> {
        let path = self.layout.scratch_checkpoint(seed);
        if path.exists() && checkpoint::read_header(&path)?.metadata.get("config_fingerprint") == Some(&self.fingerprint) {
            return checkpoint::load(&path);
        }
        let arch = self.config.architecture(splits.retain.image_shape(), splits.retain.num_classes)?;
        let (model, _) = train_original(arch, &splits.retain, &self.config.train_config(seed))?;
        checkpoint::save_with(&model, &path, &self.metadata(seed))?;
        Ok(model)
    }

    /// Relearn times of `unlearned` and of the scratch model, finetuning on
    /// the full training set. The unlearned run is capped at
    /// `cap_multiplier` times the scratch time.
    pub fn relearn_times(
        &self,
        original: &ModelSnapshot,
        unlearned: &ModelSnapshot,
        splits: &Splits,
        seed: u64,
    ) -> Result<(RelearnTime, RelearnTime)> {
        let cfg = self.config.relearn_config(seed);
        let reference = accuracy(original, &splits.forget)?;
        let scratch = self.scratch(seed, splits)?;
        let rs = relearn_time(&scratch, &splits.train, &splits.forget, reference, cfg.max_steps, &cfg)?;
        let cap = cfg.cap_multiplier.saturating_mul(rs.steps.max(1));
        let ru = relearn_time(unlearned, &splits.train, &splits.forget, reference, cap, &cfg)?;
        Ok((ru, rs))
    }

    pub fn attach_relearn(
        &self,
        report: &mut UnlearningReport,
        original: &ModelSnapshot,
        unlearned: &ModelSnapshot,
        splits: &Splits,
        seed: u64,
    ) -> Result<()> {
        let (ru, rs) = self.relearn_times(original, unlearned, splits, seed)?;
        report.attach_relearn(ru, rs)?;
        let cfg = &self.config.relearn;
        report.details["relearn"] = json!({
            "data": "full training set",
            "alpha": cfg.alpha,
            "band": cfg.band,
            "scratch_cap": cfg.max_steps,
            "unlearned_cap": cfg.cap_multiplier.saturating_mul(rs.steps.max(1)),
        });
        Ok(())
    }

    /// Compares two checkpoints on this experiment's partitions.
    pub fn evaluate_checkpoints(
        &self,
        before: &Path,
        after: &Path,
        seed: u64,
        method: &str,
        with_relearn: bool,
    ) -> Result<UnlearningReport> {
        let b = checkpoint::load(before)?;
        let a = checkpoint::load(after)?;
        let splits = self.splits()?;
        let run = RunSummary {
            method: method.to_string(),
            runtime_s: 0.0,
            details: json!({
                "before": before.display().to_string(),
                "after": after.display().to_string(),
                "dataset": self.config.dataset.name(),
                "forget_class": self.config.forget_class,
            }),
        };
        let mut report = evaluate(&b, &a, &splits, &run, seed, &self.fingerprint)?;
        if with_relearn {
            self.attach_relearn(&mut report, &b, &a, &splits, seed)?;
        }
        Ok(report)
    }

    /// Mean and spread of `method`'s stored reports over the configured
    /// seeds; written next to them.
    pub fn aggregate(&self, method: &str) -> Result<AggregateReport> {
        let reports = self
            .config
            .seeds
            .iter()
            .map(|&s| read_report(&self.layout.report(method, s)))
            .collect::<Result<Vec<_>>>()?;
        let agg = aggregate(&reports)?;
        let mut value = serde_json::to_value(&agg)?;
        value["config_fingerprint"] = self.fingerprint.clone().into();
        write_json(&self.layout.aggregate(method), &value)?;
        Ok(agg)
    }

    /// CovarNav over the configured seeds for every covariance source (with
    /// the configured objective) and every objective (with the configured
    /// source). Cells shared by both sweeps run once.
    pub fn ablate(&self) -> Result<AblationTable> {
        let splits = self.splits()?;
        let originals = self
            .config
            .seeds
            .iter()
            .map(|&s| self.original(s))
            .collect::<Result<Vec<_>>>()?;
        let mut cells: BTreeMap<(&'static str, &'static str), AggregateReport> = BTreeMap::new();
        let mut cell = |source: ProxySource, objective: Method| -> Result<AggregateReport> {
            let key = (source.id(), objective.id());
            if let Some(a) = cells.get(&key) {
                return Ok(a.clone());
            }
            let mut reports = Vec::new();
            for (&seed, original) in self.config.seeds.iter().zip(&originals) {
                let out = self.run_method(MethodId::CovarNav, seed, original, &splits, source, objective)?;
                reports.push(evaluate(original, &out.model, &splits, &out.summary, seed, &self.fingerprint)?);
            }
            let agg = aggregate(&reports)?;
            cells.insert(key, agg.clone());
            Ok(agg)
        };
        let mut rows = Vec::new();
        for &source in &self.config.ablation.sources {
            rows.push(AblationRow {
                group: "covariance_source".into(),
                setting: source.id().into(),
                summary: cell(source, self.config.unlearn.objective)?,
            });
        }
        for &objective in &self.config.ablation.objectives {
            rows.push(AblationRow {
                group: "objective".into(),
                setting: objective.id().into(),
                summary: cell(self.config.unlearn.proxy, objective)?,
            });
        }
        let table = AblationTable {
            config_fingerprint: self.fingerprint.clone(),
            rows,
        };
        write_json(&self.layout.ablation(), &table)?;
        Ok(table)
    }

    /// Penultimate features of the given checkpoints on the training or
    /// test set.
    pub fn export_embeddings(
        &self,
        checkpoints: &[PathBuf],
        partition: Partition,
        out_stem: &Path,
    ) -> Result<EmbeddingExport> {
        let models = checkpoints
            .iter()
            .map(|p| Ok((p.display().to_string(), checkpoint::load(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let (train, test) = self.data()?;
        let dataset = match partition {
            Partition::Test => test,
            _ => train,
        };
        let refs: Vec<(String, &ModelSnapshot)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
        let export = embedding::export(&refs, dataset, self.config.forget_class, 256)?;
        let mut meta = self.metadata(0);
        meta.remove("seed");
        meta.insert("partition".into(), format!("{partition:?}").to_lowercase());
        export.save(out_stem, &meta)?;
        Ok(export)
    }
}
