//! Model inversion: synthesizing a proxy for the retained data from the
//! trained model alone.
//!
//! For a batch of images `x_1..x_B` with target labels drawn from the
//! retained classes, the objective is
//!
//! ```text
//! sum_j [ CE(f(x_j), y_j) + a_tv * TV(x_j) + a_l2 * ||x_j||_2 ]
//!     + a_f * sum_l ( ||mu_l - m_l||_2 + ||sigma2_l - v_l||_2 )
//! ```
//!
//! where `mu_l`, `sigma2_l` are the per-channel batch mean and (biased)
//! variance at the input of batch-norm layer `l` and `m_l`, `v_l` are that
//! layer's stored running statistics. The network runs in evaluation mode
//! throughout; only the pixels are optimized (Adam), and pixels are clamped
//! to the valid input range after every step.

use std::collections::BTreeMap;

use ndarray::{Array1, Array4, ArrayView1, ArrayView4, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Partition, INPUT_RANGE};
use crate::error::{Error, Result};
use crate::nn::layers::channel_stats;
use crate::nn::loss::{per_sample_cross_entropy, predictions, softmax_cross_entropy};
use crate::nn::model::BackwardSpec;
use crate::nn::{Mode, ModelSnapshot};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub forget_class: usize,
    pub samples_per_class: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub alpha_f: f64,
    /// Minimum fraction of outputs the model must classify as their target.
    pub quality_threshold: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            forget_class: 0,
            samples_per_class: 100,
            batch_size: 128,
            steps: 2000,
            lr: 0.1,
            alpha_tv: 1e-4,
            alpha_l2: 1e-5,
            alpha_f: 1e-2,
            quality_threshold: 0.9,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.forget_class >= num_classes {
            return Err(Error::Label {
                label: self.forget_class,
                num_classes,
            });
        }
        if self.batch_size == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidArgument(
                "inversion batch_size and samples_per_class must be >= 1".into(),
            ));
        }
        if [self.alpha_tv, self.alpha_l2, self.alpha_f].iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::InvalidArgument("regularization coefficients must be >= 0".into()));
        }
        Ok(())
    }

    /// Retained label set `Y \ {c_f}`.
    pub fn retained_labels(&self, num_classes: usize) -> Vec<usize> {
        (0..num_classes).filter(|&c| c != self.forget_class).collect()
    }
}

/// Anisotropic total variation: sum of absolute vertical and horizontal
/// neighbor differences over every channel of every image.
pub fn tv_regularizer(images: ArrayView4<f64>) -> f64 {
    let (n, c, h, w) = images.dim();
    let mut tv = 0.0;
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = images[[i, ch, y, x]];
                    if y + 1 < h {
                        tv += (images[[i, ch, y + 1, x]] - v).abs();
                    }
                    if x + 1 < w {
                        tv += (images[[i, ch, y, x + 1]] - v).abs();
                    }
                }
            }
        }
    }
    tv
}

/// Subgradient of [`tv_regularizer`] (sign of each difference, 0 at ties).
pub fn tv_gradient(images: ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = images.dim();
    let mut g = Array4::zeros(images.raw_dim());
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = images[[i, ch, y, x]];
                    if y + 1 < h {
                        let s = sign(images[[i, ch, y + 1, x]] - v);
                        g[[i, ch, y + 1, x]] += s;
                        g[[i, ch, y, x]] -= s;
                    }
                    if x + 1 < w {
                        let s = sign(images[[i, ch, y, x + 1]] - v);
                        g[[i, ch, y, x + 1]] += s;
                        g[[i, ch, y, x]] -= s;
                    }
                }
            }
        }
    }
    g
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-image ℓ2 norms.
pub fn image_norms(images: ArrayView4<f64>) -> Array1<f64> {
    Array1::from_iter(
        images
            .axis_iter(Axis(0))
            .map(|img| img.iter().map(|v| v * v).sum::<f64>().sqrt()),
    )
}

/// Sum over the batch of each image's ℓ2 norm.
pub fn l2_regularizer(images: ArrayView4<f64>) -> f64 {
    image_norms(images).sum()
}

pub fn l2_gradient(images: ArrayView4<f64>) -> Array4<f64> {
    let norms = image_norms(images);
    let mut g = images.to_owned();
    for (mut img, &norm) in g.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        if norm > 0.0 {
            img.mapv_inplace(|v| v / norm);
        } else {
            img.fill(0.0);
        }
    }
    g
}

/// Per-channel statistics of a batch at one batch-norm layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub layer: usize,
    pub mean: Array1<f64>,
    /// Biased (population) variance.
    pub var: Array1<f64>,
}

/// Batch statistics at every batch-norm input, evaluation-mode forward.
pub fn batch_statistics(model: &ModelSnapshot, images: ArrayView4<f64>) -> Result<Vec<ChannelStats>> {
    let (_, tape) = model.forward_tape(images, Mode::Eval)?;
    Ok(tape
        .batch_norm_inputs()
        .into_iter()
        .map(|(layer, x)| {
            let (mean, var) = channel_stats(x.view());
            ChannelStats { layer, mean, var }
        })
        .collect())
}

/// `sum_l ||mu_l - m_l||_2 + ||sigma2_l - v_l||_2`.
pub fn feature_stats_loss(
    batch: &[ChannelStats],
    stored: &[(usize, ArrayView1<f64>, ArrayView1<f64>)],
) -> Result<f64> {
    if batch.len() != stored.len() {
        return Err(Error::shape(
            format!("{} batch-norm layers", stored.len()),
            format!("{} batch statistics", batch.len()),
        ));
    }
    let mut total = 0.0;
    for (b, (layer, m, v)) in batch.iter().zip(stored) {
        if b.mean.len() != m.len() || b.var.len() != v.len() {
            return Err(Error::shape(
                format!("{} channels at layer {layer}", m.len()),
                format!("{} channels", b.mean.len()),
            ));
        }
        total += l2_norm_diff(b.mean.view(), *m) + l2_norm_diff(b.var.view(), *v);
    }
    Ok(total)
}

fn l2_norm_diff(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// Summed cross-entropy toward the target labels.
    pub task: f64,
    pub tv: f64,
    pub l2: f64,
    pub feature: f64,
    /// `task + a_tv * tv + a_l2 * l2 + a_f * feature`.
    pub total: f64,
}

fn check_labels(labels: &[usize], forget_class: usize, num_classes: usize) -> Result<()> {
    if labels.contains(&forget_class) {
        return Err(Error::ForgottenClassPresent(forget_class));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Label { label: bad, num_classes });
    }
    Ok(())
}

/// Value of the inversion objective.
pub fn inversion_objective(
    images: ArrayView4<f64>,
    labels: &[usize],
    model: &ModelSnapshot,
    config: &InversionConfig,
) -> Result<ObjectiveTerms> {
    Ok(objective_and_gradient(images, labels, model, config, false)?.0)
}

/// Objective value and, when `with_grad`, its gradient w.r.t. the pixels.
pub fn objective_and_gradient(
    images: ArrayView4<f64>,
    labels: &[usize],
    model: &ModelSnapshot,
    config: &InversionConfig,
    with_grad: bool,
) -> Result<(ObjectiveTerms, Option<Array4<f64>>)> {
    check_labels(labels, config.forget_class, model.num_classes())?;
    if labels.len() != images.dim().0 {
        return Err(Error::shape(format!("{} labels", images.dim().0), labels.len()));
    }
    let n = labels.len() as f64;
    let (logits, tape) = model.forward_tape(images, Mode::Eval)?;
    let (mean_ce, mut dlogits) = softmax_cross_entropy(logits.view(), labels);
    let task = mean_ce * n;

    let stored = model.bn_stats();
    let bn_inputs = tape.batch_norm_inputs();
    let mut feature = 0.0;
    let mut extra = BTreeMap::new();
    for ((layer, x), (_, m, v)) in bn_inputs.iter().zip(&stored) {
        let (mu, var) = channel_stats(x.view());
        let dmu = &mu - m;
        let dvar = &var - v;
        let nm = dmu.dot(&dmu).sqrt();
        let nv = dvar.dot(&dvar).sqrt();
        feature += nm + nv;
        if with_grad && config.alpha_f > 0.0 {
            let (bn, _, bh, bw) = x.dim();
            let count = (bn * bh * bw) as f64;
            let a = if nm > 0.0 { dmu / nm } else { Array1::zeros(mu.len()) };
            let b = if nv > 0.0 { dvar / nv } else { Array1::zeros(var.len()) };
            let mut g = Array4::zeros(x.raw_dim());
            for c in 0..mu.len() {
                let (ac, bc, muc) = (a[c], b[c], mu[c]);
                Zip::from(g.index_axis_mut(Axis(1), c))
                    .and(x.index_axis(Axis(1), c))
                    .for_each(|gv, &xv| {
                        *gv = config.alpha_f * (ac + 2.0 * bc * (xv - muc)) / count;
                    });
            }
            extra.insert(*layer, g);
        }
    }

    let tv = tv_regularizer(images);
    let l2 = l2_regularizer(images);
    let terms = ObjectiveTerms {
        task,
        tv,
        l2,
        feature,
        total: task + config.alpha_tv * tv + config.alpha_l2 * l2 + config.alpha_f * feature,
    };
    if !with_grad {
        return Ok((terms, None));
    }

    dlogits.mapv_inplace(|g| g * n);
    let (_, dx) = model.backward(
        &tape,
        dlogits.view(),
        BackwardSpec {
            param_grads: false,
            input_grad: true,
            extra_input_grads: Some(&extra),
        },
    );
    let mut grad = dx.expect("input gradient requested");
    if config.alpha_tv > 0.0 {
        grad.scaled_add(config.alpha_tv, &tv_gradient(images));
    }
    if config.alpha_l2 > 0.0 {
        grad.scaled_add(config.alpha_l2, &l2_gradient(images));
    }
    Ok((terms, Some(grad)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityGate {
    /// Fraction of images the model classifies as their target label.
    pub fraction_on_target: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Model-inverted proxy for the retained set.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    /// Partition `Proxy`, `synthetic = true`.
    pub dataset: LabeledDataset,
    /// Final per-image objective (its own task and prior terms plus an
    /// equal share of its batch's feature term).
    pub final_objective: Vec<f64>,
    /// Mean objective per image at each step, summed over batches; index 0
    /// is the initialization.
    pub trajectory: Vec<f64>,
    pub quality: QualityGate,
    /// Mean softmax probability of the target label at init and at the end.
    pub initial_confidence: f64,
    pub final_confidence: f64,
}

/// Round-robin target labels over the retained classes.
pub fn target_labels(config: &InversionConfig, num_classes: usize) -> Vec<usize> {
    let retained = config.retained_labels(num_classes);
    let total = config.samples_per_class * retained.len();
    (0..total).map(|i| retained[i % retained.len()]).collect()
}

/// Gaussian pixels, clamped to the valid input range; batch `index` gets its
/// own stream of `seed`.
pub fn initial_images(shape: [usize; 3], n: usize, seed: u64, index: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let [c, h, w] = shape;
    Array4::from_shape_simple_fn((n, c, h, w), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z.clamp(INPUT_RANGE.0, INPUT_RANGE.1)
    })
}

fn target_confidence(model: &ModelSnapshot, images: ArrayView4<f64>, labels: &[usize]) -> Result<f64> {
    let logits = model.forward(images)?;
    Ok(per_sample_cross_entropy(logits.view(), labels).mapv(|ce| (-ce).exp()).sum())
}

/// Runs the inversion for `samples_per_class` images of every retained class.
pub fn invert(model: &ModelSnapshot, config: &InversionConfig) -> Result<SyntheticDataset> {
    let k = model.num_classes();
    config.validate(k)?;
    let labels = target_labels(config, k);
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no retained classes to invert".into()));
    }
    let shape = model.architecture().input_shape;
    let mut images = Array4::zeros((labels.len(), shape[0], shape[1], shape[2]));
    let mut final_objective = Vec::with_capacity(labels.len());
    let mut trajectory = vec![0.0; config.steps + 1];
    let (mut init_conf, mut final_conf) = (0.0, 0.0);

    for (bi, start) in (0..labels.len()).step_by(config.batch_size).enumerate() {
        let end = (start + config.batch_size).min(labels.len());
        let ys = &labels[start..end];
        let mut x = initial_images(shape, ys.len(), config.seed, bi as u64);
        init_conf += target_confidence(model, x.view(), ys)?;
        let mut adam: Adam<u8> = Adam::new(AdamConfig::with_lr(config.lr));
        for step in 0..config.steps {
            let (terms, grad) = objective_and_gradient(x.view(), ys, model, config, true)?;
            trajectory[step] += terms.total;
            let delta = adam
                .step(0, grad.expect("requested").into_dyn().view())
                .into_dimensionality::<ndarray::Ix4>()
                .expect("pixel step keeps its shape");
            Zip::from(&mut x).and(&delta).for_each(|p, &d| {
                *p = (*p - d).clamp(INPUT_RANGE.0, INPUT_RANGE.1);
            });
        }
        let terms = inversion_objective(x.view(), ys, model, config)?;
        trajectory[config.steps] += terms.total;
        let logits = model.forward(x.view())?;
        let ce = per_sample_cross_entropy(logits.view(), ys);
        let norms = image_norms(x.view());
        for j in 0..ys.len() {
            let img = x.slice(ndarray::s![j..j + 1, .., .., ..]);
            final_objective.push(
                ce[j]
                    + config.alpha_tv * tv_regularizer(img)
                    + config.alpha_l2 * norms[j]
                    + config.alpha_f * terms.feature / ys.len() as f64,
            );
        }
        final_conf += ce.mapv(|v| (-v).exp()).sum();
        images.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&x);
        log::debug!("inversion batch {bi}: objective {:.4}", terms.total);
    }
    let n = labels.len() as f64;
    for t in trajectory.iter_mut() {
        *t /= n;
    }

    let mut on_target = 0;
    for (xb, yb) in images.axis_chunks_iter(Axis(0), 256).zip(labels.chunks(256)) {
        let preds = predictions(model.forward(xb)?.view());
        on_target += preds.iter().zip(yb).filter(|(p, y)| p == y).count();
    }
    let fraction = on_target as f64 / n;
    let quality = QualityGate {
        fraction_on_target: fraction,
        threshold: config.quality_threshold,
        passed: fraction >= config.quality_threshold,
    };
    if !quality.passed {
        log::warn!(
            "inversion quality gate unmet: {:.1}% of images on target (threshold {:.1}%)",
            100.0 * fraction,
            100.0 * config.quality_threshold
        );
    }
    let mut dataset = LabeledDataset::new(Partition::Proxy, images, labels, k)?;
    dataset.synthetic = true;
    Ok(SyntheticDataset {
        dataset,
        final_objective,
        trajectory,
        quality,
        initial_confidence: init_conf / n,
        final_confidence: final_conf / n,
    })
}
