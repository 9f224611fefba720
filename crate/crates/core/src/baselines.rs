//! Post-hoc comparison methods behind one interface.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::forgetting::{self, forget_class_of, Strategy, DEFAULT_FGSM_EPSILON};
use crate::metrics::RunSummary;
use crate::navigation::{forget_descent, run_projected, CovarNavConfig, DescentConfig, ForgetObjective, StepOrder, Unlearned, UpdateScope};
use crate::nn::{train, train_original, ModelSnapshot, ParamKey, TrainConfig};
use crate::optim::{Sgd, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Retrain,
    Finetune,
    NegativeGradient,
    RandomLabels,
    BoundaryShrink,
    MaxEntropy,
    LargestWrongLogit,
    LwlL2,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Retrain,
        Method::Finetune,
        Method::NegativeGradient,
        Method::RandomLabels,
        Method::BoundaryShrink,
        Method::MaxEntropy,
        Method::LargestWrongLogit,
        Method::LwlL2,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Retrain => "retrain",
            Method::Finetune => "finetune",
            Method::NegativeGradient => "negative-gradient",
            Method::RandomLabels => "random-labels",
            Method::BoundaryShrink => "boundary-shrink",
            Method::MaxEntropy => "max-entropy",
            Method::LargestWrongLogit => "largest-wrong-logit",
            Method::LwlL2 => "lwl-l2",
        }
    }

    /// Whether the method reads the retained training set.
    pub fn needs_retained(self) -> bool {
        matches!(self, Method::Retrain | Method::Finetune | Method::NegativeGradient)
    }

    /// Forgetting strategy for the four objective-only methods.
    pub fn strategy(self, epsilon: f64) -> Option<Strategy> {
        match self {
            Method::RandomLabels => Some(Strategy::Random),
            Method::BoundaryShrink => Some(Strategy::BoundaryShrink { epsilon }),
            Method::MaxEntropy => Some(Strategy::Entropy),
            Method::LargestWrongLogit => Some(Strategy::LargestWrongLogit),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSpec {
    pub method: Method,
    /// Adam step size for the objective-only methods, SGD step size for
    /// negative gradient.
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of `||theta - theta*||^2` for `lwl-l2`.
    pub lambda_l2: f64,
    pub epsilon: f64,
    /// Multiplier on the original training rate for `finetune`.
    pub finetune_lr_factor: f64,
    /// Original training hyperparameters, reused by `retrain` and `finetune`.
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            method: Method::LargestWrongLogit,
            lr: 1e-3,
            epochs: 25,
            batch_size: 64,
            lambda_l2: 1e-2,
            epsilon: DEFAULT_FGSM_EPSILON,
            finetune_lr_factor: 10.0,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl BaselineSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }
}

fn summary(method: &str, start: Instant, details: serde_json::Value) -> RunSummary {
    RunSummary {
        method: method.to_string(),
        runtime_s: start.elapsed().as_secs_f64(),
        details,
    }
}

fn finish(model: ModelSnapshot, summary: RunSummary) -> Unlearned {
    Unlearned {
        model,
        summary,
        projection: None,
        synthetic: None,
        relabeled: None,
        cannot_forget: false,
    }
}

/// Runs an unprojected baseline; `retained` must be given exactly when the
/// method needs it.
pub fn run_baseline(
    spec: &BaselineSpec,
    model: &ModelSnapshot,
    forget: &LabeledDataset,
    retained: Option<&LabeledDataset>,
) -> Result<Unlearned> {
    let start = Instant::now();
    let method = spec.method;
    let cf = forget_class_of(forget)?;
    let retained = match (method.needs_retained(), retained) {
        (true, None) => {
            return Err(Error::RetainedAccessRequired {
                method: method.id().into(),
            })
        }
        (true, Some(r)) => {
            if r.labels.contains(&cf) {
                return Err(Error::ForgottenClassPresent(cf));
            }
            Some(r)
        }
        (false, Some(_)) => {
            return Err(Error::InvalidArgument(format!(
                "method `{method}` runs without the retained set; do not pass one"
            )))
        }
        (false, None) => None,
    };

    match method {
        Method::Retrain => {
            let r = retained.expect("checked");
            let cfg = TrainConfig {
                seed: spec.seed,
                ..spec.train.clone()
            };
            let (m, log) = train_original(model.architecture().clone(), r, &cfg)?;
            let details = json!({ "epochs": cfg.epochs, "train_accuracy": log.train_accuracy });
            Ok(finish(m, summary(method.id(), start, details)))
        }
        Method::Finetune => {
            let r = retained.expect("checked");
            let cfg = TrainConfig {
                epochs: spec.epochs,
                lr: spec.train.lr * spec.finetune_lr_factor,
                seed: spec.seed,
                ..spec.train.clone()
            };
            let (m, log) = train(model.clone(), r, &cfg)?;
            let details = json!({ "epochs": cfg.epochs, "lr": cfg.lr, "train_accuracy": log.train_accuracy });
            Ok(finish(m, summary(method.id(), start, details)))
        }
        Method::NegativeGradient => {
            let (m, clamped) = negative_gradient(spec, model, forget, retained.expect("checked"))?;
            let details = json!({ "epochs": spec.epochs, "lr": spec.lr, "clamped_forget_steps": clamped });
            Ok(finish(m, summary(method.id(), start, details)))
        }
        _ => {
            let strategy = if method == Method::LwlL2 {
                Strategy::LargestWrongLogit
            } else {
                method.strategy(spec.epsilon).expect("objective method")
            };
            let relabeled = match strategy {
                Strategy::Entropy => None,
                s => Some(forgetting::mislabel(s, model, forget, spec.seed)?),
            };
            let objective = match &relabeled {
                Some(set) => ForgetObjective::Relabeled(set),
                None => ForgetObjective::Entropy(forget),
            };
            let descent = DescentConfig {
                lr: spec.lr,
                epochs: spec.epochs,
                batch_size: spec.batch_size,
                order: StepOrder::AdamThenProject,
                scope: UpdateScope::AllTrainable,
                anchor_l2: if method == Method::LwlL2 { spec.lambda_l2 } else { 0.0 },
                seed: spec.seed,
            };
            let (m, log) = forget_descent(model, objective, &descent, None, None)?;
            let details = json!({
                "strategy": strategy.name(),
                "epochs": spec.epochs,
                "lr": spec.lr,
                "anchor_l2": descent.anchor_l2,
                "steps": log.steps,
                "epoch_loss": log.epoch_loss,
            });
            let mut out = finish(m, summary(method.id(), start, details));
            out.relabeled = relabeled;
            Ok(out)
        }
    }
}

/// Alternates one descent step on a retained batch with one ascent step on
/// a forget batch; the ascent loss is clamped at chance level. Returns the
/// model and the number of forget steps the clamp zeroed.
fn negative_gradient(
    spec: &BaselineSpec,
    model: &ModelSnapshot,
    forget: &LabeledDataset,
    retained: &LabeledDataset,
) -> Result<(ModelSnapshot, usize)> {
    if retained.is_empty() {
        return Err(Error::EmptyDataset("retained set".into()));
    }
    let mut current = model.clone();
    let keys = current.trainable_keys();
    let mut sgd: Sgd<ParamKey> = Sgd::new(SgdConfig {
        lr: spec.lr,
        momentum: spec.train.momentum,
        weight_decay: 0.0,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9E6A_7100);
    let bs = spec.batch_size.max(1);
    let mut r_order: Vec<usize> = (0..retained.len()).collect();
    let mut f_order: Vec<usize> = (0..forget.len()).collect();
    let mut clamped_steps = 0;
    for epoch in 0..spec.epochs {
        r_order.shuffle(&mut rng);
        f_order.shuffle(&mut rng);
        let f_batches: Vec<&[usize]> = f_order.chunks(bs).collect();
        for (i, r_idx) in r_order.chunks(bs).enumerate() {
            let rb = retained.select(r_idx, retained.partition);
            let (loss, g) = forgetting::cross_entropy_gradients(&current, rb.images.view(), &rb.labels)?;
            check_finite(loss, epoch, i)?;
            apply_sgd(&mut current, &mut sgd, &keys, &g);

            let f_idx = f_batches[i % f_batches.len()];
            let fb = forget.select(f_idx, forget.partition);
            let (floss, fg) = forgetting::entropy_maximization_gradients(&current, fb.images.view(), &fb.labels)?;
            check_finite(floss, epoch, i)?;
            if fg.iter().all(|(_, t)| t.iter().all(|v| *v == 0.0)) {
                clamped_steps += 1;
                continue;
            }
            apply_sgd(&mut current, &mut sgd, &keys, &fg);
        }
    }
    Ok((current, clamped_steps))
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { loss, epoch, step })
    }
}

fn apply_sgd(model: &mut ModelSnapshot, sgd: &mut Sgd<ParamKey>, keys: &[ParamKey], grads: &crate::nn::Gradients) {
    for &key in keys {
        let g = grads.get(key).expect("gradient for every trainable key");
        let param = model.tensor(key).expect("key exists").to_owned();
        let step = sgd.step(key, g.view(), param.view());
        let mut p = model.tensor_mut(key).expect("key exists");
        p -= &step;
    }
}

/// One of the four forgetting objectives combined with inversion and
/// projection: [`crate::navigation::covarnav_unlearn`] with the strategy
/// swapped.
pub fn run_baseline_with_projection(
    spec: &BaselineSpec,
    model: &ModelSnapshot,
    forget: &LabeledDataset,
    proxy: Option<&LabeledDataset>,
    config: &CovarNavConfig,
) -> Result<Unlearned> {
    let strategy = spec.method.strategy(spec.epsilon).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "method `{}` is not a forgetting objective and cannot be projected",
            spec.method
        ))
    })?;
    let cfg = CovarNavConfig {
        strategy,
        ..config.clone()
    };
    run_projected(model, forget, proxy, &cfg, &format!("{}+projection", spec.method))
}
