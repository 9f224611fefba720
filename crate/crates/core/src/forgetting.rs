//! Replacement labels for the forget set and the losses that drive
//! forgetting.

use std::path::Path;

use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::packed::{self, DType};
use crate::dataset::{LabeledDataset, Partition, INPUT_RANGE};
use crate::error::{Error, Result};
use crate::nn::loss::{predictions, softmax_cross_entropy};
use crate::nn::model::BackwardSpec;
use crate::nn::{Gradients, Mode, ModelSnapshot};

pub const DEFAULT_FGSM_EPSILON: f64 = 0.03;

/// How the forget set is relabeled, or `Entropy` for no relabeling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    LargestWrongLogit,
    Random,
    BoundaryShrink { epsilon: f64 },
    Entropy,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::LargestWrongLogit => "largest-wrong-logit",
            Strategy::Random => "random-labels",
            Strategy::BoundaryShrink { .. } => "boundary-shrink",
            Strategy::Entropy => "max-entropy",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "largest-wrong-logit" | "lwl" => Ok(Strategy::LargestWrongLogit),
            "random-labels" | "random" => Ok(Strategy::Random),
            "boundary-shrink" => Ok(Strategy::BoundaryShrink {
                epsilon: DEFAULT_FGSM_EPSILON,
            }),
            "max-entropy" | "entropy" => Ok(Strategy::Entropy),
            other => Err(Error::InvalidArgument(format!("unknown forgetting strategy {other:?}"))),
        }
    }
}

/// Forget-set images paired with replacement labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MislabeledForgetSet {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub forget_class: usize,
    pub num_classes: usize,
    pub strategy: Strategy,
    /// Fingerprint of the forget set the labels were derived from.
    pub source_fingerprint: String,
}

impl MislabeledForgetSet {
    fn new(forget: &LabeledDataset, forget_class: usize, labels: Vec<usize>, strategy: Strategy) -> Self {
        debug_assert!(labels.iter().all(|&y| y != forget_class));
        Self {
            images: forget.images.clone(),
            labels,
            forget_class,
            num_classes: forget.num_classes,
            strategy,
            source_fingerprint: forget.fingerprint(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The images with their replacement labels.
    pub fn as_dataset(&self) -> Result<LabeledDataset> {
        LabeledDataset::new(Partition::Forget, self.images.clone(), self.labels.clone(), self.num_classes)
    }

    /// Writes the packed dataset with the true labels kept alongside.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let original = vec![self.forget_class; self.len()];
        let extras = packed::Extras {
            original_labels: Some(&original),
            strategy: Some(self.strategy.name()),
            metadata: None,
        };
        packed::write_with(&self.as_dataset()?, stem, DType::F64, extras)
    }
}

/// The single class a forget set holds.
pub fn forget_class_of(forget: &LabeledDataset) -> Result<usize> {
    let &first = forget
        .labels
        .first()
        .ok_or_else(|| Error::EmptyDataset("forget set".into()))?;
    if let Some(&other) = forget.labels.iter().find(|&&y| y != first) {
        return Err(Error::InvalidArgument(format!(
            "forget set mixes classes {first} and {other}"
        )));
    }
    Ok(first)
}

/// Index of the largest logit other than `forget_class`; lowest index on ties.
pub fn largest_wrong_logit(logits: ArrayView1<f64>, forget_class: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if i != forget_class && (best == usize::MAX || v > best_v) {
            best = i;
            best_v = v;
        }
    }
    best
}

fn eval_logits(model: &ModelSnapshot, images: ArrayView4<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((images.dim().0, model.num_classes()));
    let mut start = 0;
    for chunk in images.axis_chunks_iter(Axis(0), 256) {
        let n = chunk.dim().0;
        out.slice_mut(ndarray::s![start..start + n, ..]).assign(&model.forward(chunk)?);
        start += n;
    }
    Ok(out)
}

fn lwl_labels(logits: ArrayView2<f64>, forget_class: usize) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| largest_wrong_logit(row, forget_class))
        .collect()
}

pub fn mislabel_largest_wrong_logit(model: &ModelSnapshot, forget: &LabeledDataset) -> Result<MislabeledForgetSet> {
    let cf = forget_class_of(forget)?;
    let logits = eval_logits(model, forget.images.view())?;
    Ok(MislabeledForgetSet::new(forget, cf, lwl_labels(logits.view(), cf), Strategy::LargestWrongLogit))
}

/// Uniform random labels over the retained classes.
pub fn mislabel_random(forget: &LabeledDataset, num_classes: usize, seed: u64) -> Result<MislabeledForgetSet> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("random relabeling needs at least two classes".into()));
    }
    let cf = forget_class_of(forget)?;
    if cf >= num_classes {
        return Err(Error::Label { label: cf, num_classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..forget.len())
        .map(|_| {
            let r = rng.random_range(0..num_classes - 1);
            if r >= cf {
                r + 1
            } else {
                r
            }
        })
        .collect();
    Ok(MislabeledForgetSet::new(forget, cf, labels, Strategy::Random))
}

/// One FGSM step away from the forget class, clamped to the input range.
pub fn fgsm(model: &ModelSnapshot, images: ArrayView4<f64>, labels: &[usize], epsilon: f64) -> Result<Array4<f64>> {
    let mut out = images.to_owned();
    let mut start = 0;
    for (chunk, ys) in images.axis_chunks_iter(Axis(0), 256).zip(labels.chunks(256)) {
        let n = chunk.dim().0;
        let (logits, tape) = model.forward_tape(chunk, Mode::Eval)?;
        let (_, dlogits) = softmax_cross_entropy(logits.view(), ys);
        let (_, dx) = model.backward(
            &tape,
            dlogits.view(),
            BackwardSpec {
                input_grad: true,
                ..Default::default()
            },
        );
        let dx = dx.expect("input gradient requested");
        Zip::from(out.slice_mut(ndarray::s![start..start + n, .., .., ..]))
            .and(&dx)
            .for_each(|x, &g| {
                let s = if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *x = (*x + epsilon * s).clamp(INPUT_RANGE.0, INPUT_RANGE.1);
            });
        start += n;
    }
    Ok(out)
}

/// Label of each sample's FGSM neighbor, falling back to the largest wrong
/// logit at the neighbor when the prediction there is still `c_f`.
pub fn mislabel_boundary_shrink(model: &ModelSnapshot, forget: &LabeledDataset, epsilon: f64) -> Result<MislabeledForgetSet> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let cf = forget_class_of(forget)?;
    let adversarial = fgsm(model, forget.images.view(), &forget.labels, epsilon)?;
    let logits = eval_logits(model, adversarial.view())?;
    let labels = predictions(logits.view())
        .into_iter()
        .zip(logits.axis_iter(Axis(0)))
        .map(|(p, row)| if p == cf { largest_wrong_logit(row, cf) } else { p })
        .collect();
    Ok(MislabeledForgetSet::new(forget, cf, labels, Strategy::BoundaryShrink { epsilon }))
}

/// Relabels `forget` with any strategy except `Entropy`.
pub fn mislabel(strategy: Strategy, model: &ModelSnapshot, forget: &LabeledDataset, seed: u64) -> Result<MislabeledForgetSet> {
    match strategy {
        Strategy::LargestWrongLogit => mislabel_largest_wrong_logit(model, forget),
        Strategy::Random => mislabel_random(forget, model.num_classes(), seed),
        Strategy::BoundaryShrink { epsilon } => mislabel_boundary_shrink(model, forget, epsilon),
        Strategy::Entropy => Err(Error::InvalidArgument("entropy maximization does not relabel".into())),
    }
}

/// Mean cross-entropy and its parameter gradients, batch norm frozen.
pub fn cross_entropy_gradients(model: &ModelSnapshot, images: ArrayView4<f64>, labels: &[usize]) -> Result<(f64, Gradients)> {
    let (logits, tape) = model.forward_tape(images, Mode::Eval)?;
    let (loss, dlogits) = softmax_cross_entropy(logits.view(), labels);
    let (grads, _) = model.backward(
        &tape,
        dlogits.view(),
        BackwardSpec {
            param_grads: true,
            ..Default::default()
        },
    );
    Ok((loss, grads))
}

fn mean_cross_entropy(model: &ModelSnapshot, images: ArrayView4<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset("forget set".into()));
    }
    let mut total = 0.0;
    for (chunk, ys) in images.axis_chunks_iter(Axis(0), 256).zip(labels.chunks(256)) {
        let logits = model.forward(chunk)?;
        total += softmax_cross_entropy(logits.view(), ys).0 * ys.len() as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Mean cross-entropy of the model against the replacement labels.
pub fn forgetting_loss(model: &ModelSnapshot, set: &MislabeledForgetSet) -> Result<f64> {
    mean_cross_entropy(model, set.images.view(), &set.labels)
}

/// `max(-CE, -ln K)` from a mean cross-entropy on the true labels.
pub fn clamped_negative(ce: f64, num_classes: usize) -> (f64, bool) {
    let chance = (num_classes as f64).ln();
    let floor = -chance;
    if ce >= chance * (1.0 - 1e-12) {
        (floor, true)
    } else {
        (-ce, false)
    }
}

/// Negated mean cross-entropy on the true labels, clamped at `-ln K`.
pub fn entropy_maximization_loss(model: &ModelSnapshot, forget: &LabeledDataset) -> Result<f64> {
    let ce = mean_cross_entropy(model, forget.images.view(), &forget.labels)?;
    Ok(clamped_negative(ce, model.num_classes()).0)
}

/// Value and gradient of the clamped negated cross-entropy on one batch;
/// the gradient is zero while the clamp is active.
pub fn entropy_maximization_gradients(model: &ModelSnapshot, images: ArrayView4<f64>, labels: &[usize]) -> Result<(f64, Gradients)> {
    let (ce, mut grads) = cross_entropy_gradients(model, images, labels)?;
    let (loss, clamped) = clamped_negative(ce, model.num_classes());
    grads.scale(if clamped { 0.0 } else { -1.0 });
    Ok((loss, grads))
}
