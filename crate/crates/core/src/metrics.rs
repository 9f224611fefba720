//! Four-way accuracies, relearn time and the Anamnesis Index.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Splits};
use crate::error::{Error, Result};
use crate::nn::loss::predictions;
use crate::nn::ModelSnapshot;
use crate::nn::train::SgdTrainer;
use crate::optim::SgdConfig;

const EVAL_BATCH: usize = 256;

/// Number of correct top-1 predictions in evaluation mode.
pub fn correct_count(model: &ModelSnapshot, dataset: &LabeledDataset) -> Result<usize> {
    let mut correct = 0;
    for (x, y) in dataset.chunks(EVAL_BATCH) {
        let logits = model.forward(x)?;
        correct += predictions(logits.view()).iter().zip(y).filter(|(p, t)| p == t).count();
    }
    Ok(correct)
}

/// Top-1 accuracy in evaluation mode, as a fraction.
pub fn accuracy(model: &ModelSnapshot, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(format!("{:?} partition", dataset.partition)));
    }
    Ok(correct_count(model, dataset)? as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub df: f64,
    pub dr: f64,
    pub dft: f64,
    pub drt: f64,
    pub counts: PartitionCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub df: usize,
    pub dr: usize,
    pub dft: usize,
    pub drt: usize,
}

impl AccuracyReport {
    pub fn measure(model: &ModelSnapshot, splits: &Splits) -> Result<Self> {
        Ok(Self {
            df: accuracy(model, &splits.forget)?,
            dr: accuracy(model, &splits.retain)?,
            dft: accuracy(model, &splits.forget_test)?,
            drt: accuracy(model, &splits.retain_test)?,
            counts: PartitionCounts {
                df: splits.forget.len(),
                dr: splits.retain.len(),
                dft: splits.forget_test.len(),
                drt: splits.retain_test.len(),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    /// Reached when `acc >= (1 - alpha) * reference`.
    Relative,
    /// Reached when `acc >= reference - alpha`.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelearnConfig {
    pub alpha: f64,
    pub band: Band,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Step cap for the scratch model.
    pub max_steps: usize,
    /// Cap for unlearned models as a multiple of the scratch relearn time.
    pub cap_multiplier: usize,
    pub seed: u64,
}

impl Default for RelearnConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            band: Band::Relative,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_steps: 1000,
            cap_multiplier: 50,
            seed: 0,
        }
    }
}

impl RelearnConfig {
    pub fn target(&self, reference_acc: f64) -> f64 {
        match self.band {
            Band::Relative => (1.0 - self.alpha) * reference_acc,
            Band::Absolute => reference_acc - self.alpha,
        }
    }
}

/// Forget-set accuracy after each relearning step; `accuracies[0]` is the
/// accuracy before any step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelearnCurve {
    pub accuracies: Vec<f64>,
    pub target: f64,
    pub cap: usize,
    /// First step whose accuracy reaches the target, or `cap` if none did.
    pub steps: usize,
    pub capped: bool,
}

/// Finetunes a copy of `model` on `train_set` one minibatch at a time and
/// evaluates forget-set accuracy after every step, stopping at the target.
pub fn relearn_curve(
    model: &ModelSnapshot,
    train_set: &LabeledDataset,
    forget_set: &LabeledDataset,
    reference_acc: f64,
    cap: usize,
    config: &RelearnConfig,
) -> Result<RelearnCurve> {
    if !(0.0..1.0).contains(&config.alpha) || config.alpha == 0.0 {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", config.alpha)));
    }
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("relearn training set".into()));
    }
    let target = config.target(reference_acc);
    let mut accuracies = vec![accuracy(model, forget_set)?];
    if accuracies[0] >= target {
        return Ok(RelearnCurve {
            accuracies,
            target,
            cap,
            steps: 0,
            capped: false,
        });
    }
    let mut trainer = SgdTrainer::new(
        model.clone(),
        SgdConfig {
            lr: config.lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0E1E_A2A0);
    let mut order: Vec<usize> = Vec::new();
    let bs = config.batch_size.max(2);
    for step in 1..=cap {
        if order.len() < bs {
            let mut fresh: Vec<usize> = (0..train_set.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let chunk: Vec<usize> = order.drain(..bs.min(order.len())).collect();
        let batch = train_set.select(&chunk, train_set.partition);
        trainer.step(batch.images.view(), &batch.labels)?;
        let acc = accuracy(trainer.model(), forget_set)?;
        accuracies.push(acc);
        if acc >= target {
            return Ok(RelearnCurve {
                accuracies,
                target,
                cap,
                steps: step,
                capped: false,
            });
        }
    }
    Ok(RelearnCurve {
        accuracies,
        target,
        cap,
        steps: cap,
        capped: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelearnTime {
    pub steps: usize,
    pub capped: bool,
}

pub fn relearn_time(
    model: &ModelSnapshot,
    train_set: &LabeledDataset,
    forget_set: &LabeledDataset,
    reference_acc: f64,
    cap: usize,
    config: &RelearnConfig,
) -> Result<RelearnTime> {
    let c = relearn_curve(model, train_set, forget_set, reference_acc, cap, config)?;
    Ok(RelearnTime {
        steps: c.steps,
        capped: c.capped,
    })
}

/// `AIN = rt_unlearned / rt_scratch`; 1.0 is ideal.
pub fn anamnesis_index(rt_unlearned: usize, rt_scratch: usize) -> Result<f64> {
    if rt_scratch == 0 {
        return Err(Error::Degenerate(
            "scratch model relearns in 0 steps; the index is undefined".into(),
        ));
    }
    Ok(rt_unlearned as f64 / rt_scratch as f64)
}

/// What an unlearning method reports about its own run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub runtime_s: f64,
    #[serde(default)]
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeforeAfter {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub df: BeforeAfter,
    pub dr: BeforeAfter,
    pub dft: BeforeAfter,
    pub drt: BeforeAfter,
}

impl AccuracyTable {
    pub fn from_reports(before: &AccuracyReport, after: &AccuracyReport) -> Self {
        let pair = |b, a| BeforeAfter { before: b, after: a };
        Self {
            df: pair(before.df, after.df),
            dr: pair(before.dr, after.dr),
            dft: pair(before.dft, after.dft),
            drt: pair(before.drt, after.drt),
        }
    }

    pub fn fields(&self) -> [(&'static str, BeforeAfter); 4] {
        [("df", self.df), ("dr", self.dr), ("dft", self.dft), ("drt", self.drt)]
    }
}

/// One unlearning run, serialized as `report.json`. Every method emits
/// exactly this field set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearningReport {
    pub method: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub acc: AccuracyTable,
    pub ain: Option<f64>,
    pub rt_unlearned: Option<usize>,
    pub rt_scratch: Option<usize>,
    pub capped: Option<bool>,
    pub runtime_s: f64,
    pub details: serde_json::Value,
}

/// Field names of [`UnlearningReport`] in serialized form.
pub const REPORT_FIELDS: [&str; 10] = [
    "method",
    "seed",
    "config_fingerprint",
    "acc",
    "ain",
    "rt_unlearned",
    "rt_scratch",
    "capped",
    "runtime_s",
    "details",
];

fn check_splits(splits: &Splits) -> Result<()> {
    let c = splits.forget_class;
    let forget_ok = splits.forget.labels.iter().chain(&splits.forget_test.labels).all(|&y| y == c);
    let retain_ok = splits.retain.labels.iter().chain(&splits.retain_test.labels).all(|&y| y != c);
    if !forget_ok || !retain_ok {
        return Err(Error::InvalidArgument(format!(
            "partitions are inconsistent with forget class {c}"
        )));
    }
    Ok(())
}

/// Measures both snapshots on all four partitions.
pub fn evaluate(
    before: &ModelSnapshot,
    after: &ModelSnapshot,
    splits: &Splits,
    run: &RunSummary,
    seed: u64,
    config_fingerprint: &str,
) -> Result<UnlearningReport> {
    check_splits(splits)?;
    if before.architecture() != after.architecture() {
        return Err(Error::shape("same architecture before and after", "different architectures"));
    }
    let b = AccuracyReport::measure(before, splits)?;
    let a = if before == after { b } else { AccuracyReport::measure(after, splits)? };
    Ok(UnlearningReport {
        method: run.method.clone(),
        seed,
        config_fingerprint: config_fingerprint.to_owned(),
        acc: AccuracyTable::from_reports(&b, &a),
        ain: None,
        rt_unlearned: None,
        rt_scratch: None,
        capped: None,
        runtime_s: run.runtime_s,
        details: run.details.clone(),
    })
}

impl UnlearningReport {
    pub fn attach_relearn(&mut self, unlearned: RelearnTime, scratch: RelearnTime) -> Result<()> {
        self.ain = Some(anamnesis_index(unlearned.steps, scratch.steps)?);
        self.rt_unlearned = Some(unlearned.steps);
        self.rt_scratch = Some(scratch.steps);
        self.capped = Some(unlearned.capped || scratch.capped);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Mean and spread over seeds of one method's reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub method: String,
    pub seeds: Vec<u64>,
    pub acc: BTreeMap<String, BTreeMap<String, MeanStd>>,
    pub ain: Option<MeanStd>,
    pub runtime_s: MeanStd,
}

pub fn aggregate(reports: &[UnlearningReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    if reports.iter().any(|r| r.method != first.method) {
        return Err(Error::InvalidArgument("reports of different methods".into()));
    }
    let mut acc = BTreeMap::new();
    for (i, (name, _)) in first.acc.fields().iter().enumerate() {
        let before: Vec<f64> = reports.iter().map(|r| r.acc.fields()[i].1.before).collect();
        let after: Vec<f64> = reports.iter().map(|r| r.acc.fields()[i].1.after).collect();
        acc.insert(
            name.to_string(),
            BTreeMap::from([
                ("before".to_string(), MeanStd::of(&before)),
                ("after".to_string(), MeanStd::of(&after)),
            ]),
        );
    }
    let ains: Vec<f64> = reports.iter().filter_map(|r| r.ain).collect();
    Ok(AggregateReport {
        method: first.method.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        acc,
        ain: (ains.len() == reports.len()).then(|| MeanStd::of(&ains)),
        runtime_s: MeanStd::of(&reports.iter().map(|r| r.runtime_s).collect::<Vec<_>>()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ain_arithmetic() {
        assert_eq!(anamnesis_index(32, 4).unwrap(), 8.0);
        assert_eq!(anamnesis_index(7, 7).unwrap(), 1.0);
        assert!(matches!(anamnesis_index(3, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn band_targets() {
        let rel = RelearnConfig { alpha: 0.1, ..Default::default() };
        assert!((rel.target(0.9) - 0.81).abs() < 1e-12);
        let abs = RelearnConfig { alpha: 0.1, band: Band::Absolute, ..Default::default() };
        assert!((abs.target(0.9) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
