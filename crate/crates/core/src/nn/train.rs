use std::time::Instant;

use ndarray::{ArrayView4, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, LayerSpec};
use super::loss::{predictions, softmax_cross_entropy};
use super::model::{BackwardSpec, LayerParams, Mode, ModelSnapshot, ParamKey};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::optim::{Sgd, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `lr` to zero over all epochs.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub running_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Evaluation-mode accuracy on the training set after the last epoch.
    pub train_accuracy: f64,
    pub runtime_s: f64,
}

/// Minibatch SGD on a working copy of a snapshot, with batch norm in
/// training mode and running statistics updated from every batch.
#[derive(Debug, Clone)]
pub struct SgdTrainer {
    model: ModelSnapshot,
    opt: Sgd<ParamKey>,
    keys: Vec<ParamKey>,
    steps: usize,
}

impl SgdTrainer {
    pub fn new(model: ModelSnapshot, config: SgdConfig) -> Self {
        let keys = model.trainable_keys();
        Self {
            model,
            opt: Sgd::new(config),
            keys,
            steps: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.config.lr = lr;
    }

    pub fn model(&self) -> &ModelSnapshot {
        &self.model
    }

    pub fn into_model(self) -> ModelSnapshot {
        self.model
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One SGD step on a batch; returns the loss and the batch predictions.
    pub fn step(&mut self, x: ArrayView4<f64>, labels: &[usize]) -> Result<(f64, Vec<usize>)> {
        let (logits, tape) = self.model.forward_tape(x, Mode::Train)?;
        let (loss, dlogits) = softmax_cross_entropy(logits.view(), labels);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss,
                epoch: 0,
                step: self.steps,
            });
        }
        let (grads, _) = self.model.backward(
            &tape,
            dlogits.view(),
            BackwardSpec {
                param_grads: true,
                ..Default::default()
            },
        );
        for &key in &self.keys {
            let g = grads.get(key).expect("gradient for every trainable key");
            let param = self.model.tensor(key).expect("key exists").to_owned();
            let delta = self.opt.step(key, g.view(), param.view());
            let mut p = self.model.tensor_mut(key).expect("key exists");
            p -= &delta;
        }
        update_running_stats(&mut self.model, &tape.batch_stats, x.dim());
        self.steps += 1;
        Ok((loss, predictions(logits.view())))
    }
}

fn update_running_stats(
    model: &mut ModelSnapshot,
    stats: &[(usize, ndarray::Array1<f64>, ndarray::Array1<f64>)],
    input_dim: (usize, usize, usize, usize),
) {
    let arch: Architecture = model.architecture().clone();
    let shapes = arch.validate().expect("valid architecture");
    for (layer, mean, var) in stats {
        let LayerSpec::BatchNorm { momentum, .. } = arch.layers[*layer] else {
            continue;
        };
        // Input shape of this BN layer is the output shape of the previous layer.
        let [_, h, w] = if *layer == 0 { arch.input_shape } else { shapes[*layer - 1] };
        let count = (input_dim.0 * h * w) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        if let LayerParams::BatchNorm {
            running_mean,
            running_var,
            ..
        } = model.layer_mut(*layer)
        {
            Zip::from(running_mean).and(mean).for_each(|r, &m| *r = (1.0 - momentum) * *r + momentum * m);
            Zip::from(running_var)
                .and(var)
                .for_each(|r, &v| *r = (1.0 - momentum) * *r + momentum * v * unbias);
        }
    }
}

/// Trains `model` on `dataset` for `config.epochs` epochs.
pub fn train(model: ModelSnapshot, dataset: &LabeledDataset, config: &TrainConfig) -> Result<(ModelSnapshot, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    let start = Instant::now();
    let mut trainer = SgdTrainer::new(
        model,
        SgdConfig {
            lr: config.lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7EA1_0000);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        trainer.set_lr(lr);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (step, chunk) in order.chunks(config.batch_size.max(1)).enumerate() {
            // Batch norm needs more than one value per channel.
            if chunk.len() < 2 && dataset.len() > 1 {
                continue;
            }
            let batch = dataset.select(chunk, dataset.partition);
            let (loss, preds) = trainer.step(batch.images.view(), &batch.labels).map_err(|e| match e {
                Error::NonFiniteLoss { loss, .. } => Error::NonFiniteLoss { loss, epoch, step },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            correct += preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
            seen += chunk.len();
        }
        let log = EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / seen.max(1) as f64,
            running_accuracy: correct as f64 / seen.max(1) as f64,
        };
        log::debug!("epoch {epoch}: loss {:.4} acc {:.3}", log.mean_loss, log.running_accuracy);
        epochs.push(log);
    }
    let model = trainer.into_model();
    let train_accuracy = crate::metrics::accuracy(&model, dataset)?;
    Ok((
        model,
        TrainLog {
            epochs,
            train_accuracy,
            runtime_s: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Fresh initialization from `arch` and `config.seed`, then [`train`].
pub fn train_original(arch: Architecture, dataset: &LabeledDataset, config: &TrainConfig) -> Result<(ModelSnapshot, TrainLog)> {
    if arch.num_classes != dataset.num_classes {
        return Err(Error::shape(
            format!("{} classes", arch.num_classes),
            format!("dataset with {} classes", dataset.num_classes),
        ));
    }
    let init = ModelSnapshot::init(arch, config.seed)?;
    train(init, dataset, config)
}
