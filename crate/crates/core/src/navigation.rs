//! The projected unlearning loop.
//!
//! [`covarnav_unlearn`] runs the full pipeline: a proxy for the retained data
//! (inverted from the model unless one is supplied), replacement labels for
//! the forget set, null-space bases from the proxy's layer-input covariances,
//! then Adam on the forgetting loss with every layer's step projected onto its
//! basis before it is applied. Biases and batch-norm parameters stay fixed and
//! batch norm runs on its stored statistics.
//!
//! [`forget_descent`] is the loop itself. With `projection = None` it is plain
//! descent on the same objective, which is how the unprojected baselines run.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{ArrayD, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::forgetting::{self, forget_class_of, MislabeledForgetSet, Strategy};
use crate::inversion::{invert, InversionConfig, SyntheticDataset};
use crate::metrics::RunSummary;
use crate::nn::{Gradients, ModelSnapshot, ParamKey, ParamKind};
use crate::optim::{Adam, AdamConfig};
use crate::projection::{build_projection_set, project_update, ProjectionConfig, ProjectionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOrder {
    /// Adam sees raw gradients; only the applied step is projected.
    AdamThenProject,
    /// Gradients are projected before they reach Adam.
    ProjectThenAdam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    /// Conv and linear weight matrices only.
    Weights,
    /// Every trainable tensor, biases and batch-norm affine included.
    AllTrainable,
}

/// What the loop minimizes.
#[derive(Debug, Clone, Copy)]
pub enum ForgetObjective<'a> {
    /// Mean cross-entropy against replacement labels.
    Relabeled(&'a MislabeledForgetSet),
    /// Negated cross-entropy on the true labels, clamped at `-ln K`.
    Entropy(&'a LabeledDataset),
}

impl ForgetObjective<'_> {
    fn len(&self) -> usize {
        match self {
            ForgetObjective::Relabeled(s) => s.len(),
            ForgetObjective::Entropy(d) => d.len(),
        }
    }

    fn batch_loss(&self, model: &ModelSnapshot, idx: &[usize]) -> Result<(f64, Gradients)> {
        match self {
            ForgetObjective::Relabeled(s) => {
                let x = s.images.select(ndarray::Axis(0), idx);
                let y: Vec<usize> = idx.iter().map(|&i| s.labels[i]).collect();
                forgetting::cross_entropy_gradients(model, x.view(), &y)
            }
            ForgetObjective::Entropy(d) => {
                let x = d.images.select(ndarray::Axis(0), idx);
                let y: Vec<usize> = idx.iter().map(|&i| d.labels[i]).collect();
                forgetting::entropy_maximization_gradients(model, x.view(), &y)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Minibatch size over the forget set; 0 uses the whole set per step.
    pub batch_size: usize,
    pub order: StepOrder,
    pub scope: UpdateScope,
    /// Weight of `||theta - theta*||^2` added to the loss.
    pub anchor_l2: f64,
    pub seed: u64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 25,
            batch_size: 0,
            order: StepOrder::AdamThenProject,
            scope: UpdateScope::Weights,
            anchor_l2: 0.0,
            seed: 0,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.anchor_l2 >= 0.0) {
            return Err(Error::InvalidArgument("anchor_l2 must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentLog {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    /// Projection sets rebuilt along the way (refresh variant only).
    pub refreshes: usize,
}

/// Rebuilds the projection set from the current model; used by the refresh
/// variant.
pub type Refresh<'a> = &'a dyn Fn(&ModelSnapshot) -> Result<ProjectionSet>;

fn updated_keys(model: &ModelSnapshot, scope: UpdateScope) -> Vec<ParamKey> {
    model
        .trainable_keys()
        .into_iter()
        .filter(|k| scope == UpdateScope::AllTrainable || k.kind == ParamKind::Weight)
        .collect()
}

fn project_tensor(t: &ArrayD<f64>, key: ParamKey, set: Option<&ProjectionSet>) -> Result<ArrayD<f64>> {
    let Some(basis) = set.and_then(|s| s.get(key.layer)).filter(|_| key.kind == ParamKind::Weight) else {
        return Ok(t.clone());
    };
    let m = t.view().into_dimensionality::<Ix2>().map_err(|e| Error::shape("2-d weight", e))?;
    Ok(project_update(m, basis)?.into_dyn())
}

/// Adam descent on `objective`, each step optionally projected.
pub fn forget_descent(
    model: &ModelSnapshot,
    objective: ForgetObjective<'_>,
    config: &DescentConfig,
    projection: Option<&ProjectionSet>,
    refresh: Option<(usize, Refresh<'_>)>,
) -> Result<(ModelSnapshot, DescentLog)> {
    config.validate()?;
    let n = objective.len();
    if n == 0 {
        return Err(Error::EmptyDataset("forget set".into()));
    }
    let anchor = model.clone();
    let mut current = model.clone();
    let keys = updated_keys(model, config.scope);
    let mut adam: Adam<ParamKey> = Adam::new(AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xF0_12_6E_7);
    let mut order: Vec<usize> = (0..n).collect();
    let bs = if config.batch_size == 0 { n } else { config.batch_size };
    let mut owned_projection: Option<ProjectionSet> = None;
    let mut log = DescentLog {
        epoch_loss: Vec::with_capacity(config.epochs),
        steps: 0,
        refreshes: 0,
    };

    for epoch in 0..config.epochs {
        if let Some((every, rebuild)) = refresh {
            if every > 0 && epoch > 0 && epoch % every == 0 {
                owned_projection = Some(rebuild(&current)?);
                log.refreshes += 1;
            }
        }
        let proj = owned_projection.as_ref().or(projection);
        if bs < n {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(bs) {
            let (loss, mut grads) = objective.batch_loss(&current, idx)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss,
                    epoch,
                    step: log.steps,
                });
            }
            loss_sum += loss;
            batches += 1;
            if config.anchor_l2 > 0.0 {
                for &key in &keys {
                    let diff = &current.tensor(key).expect("key exists") - &anchor.tensor(key).expect("key exists");
                    let g = grads.0.get_mut(&key).expect("gradient for every key");
                    g.scaled_add(2.0 * config.anchor_l2, &diff);
                }
            }
            let mut steps = BTreeMap::new();
            for &key in &keys {
                let g = grads.get(key).expect("gradient for every key");
                let step = match config.order {
                    StepOrder::AdamThenProject => project_tensor(&adam.step(key, g.view()), key, proj)?,
                    StepOrder::ProjectThenAdam => adam.step(key, project_tensor(g, key, proj)?.view()),
                };
                steps.insert(key, step);
            }
            for (key, step) in steps {
                let mut p = current.tensor_mut(key).expect("key exists");
                p -= &step;
            }
            log.steps += 1;
        }
        log.epoch_loss.push(loss_sum / batches as f64);
        log::debug!("forget epoch {epoch}: loss {:.5}", loss_sum / batches as f64);
    }
    Ok((current, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovarNavConfig {
    pub projection: ProjectionConfig,
    pub descent: DescentConfig,
    pub strategy: Strategy,
    pub inversion: InversionConfig,
    /// Rebuild the projection set from the current model every this many
    /// epochs; 0 keeps the set computed from the original model.
    pub refresh_every: usize,
    pub seed: u64,
}

impl Default for CovarNavConfig {
    fn default() -> Self {
        Self {
            projection: ProjectionConfig::default(),
            descent: DescentConfig::default(),
            strategy: Strategy::LargestWrongLogit,
            inversion: InversionConfig::default(),
            refresh_every: 0,
            seed: 0,
        }
    }
}

/// Result of an unlearning run with its intermediate artifacts.
#[derive(Debug, Clone)]
pub struct Unlearned {
    pub model: ModelSnapshot,
    pub summary: RunSummary,
    pub projection: Option<ProjectionSet>,
    pub synthetic: Option<SyntheticDataset>,
    pub relabeled: Option<MislabeledForgetSet>,
    /// Set when every selected layer has an empty null space.
    pub cannot_forget: bool,
}

/// Full pipeline; inverts a proxy when `proxy` is `None`.
pub fn covarnav_unlearn(
    model: &ModelSnapshot,
    forget: &LabeledDataset,
    proxy: Option<&LabeledDataset>,
    config: &CovarNavConfig,
) -> Result<Unlearned> {
    run_projected(model, forget, proxy, config, "covarnav")
}

pub(crate) fn run_projected(
    model: &ModelSnapshot,
    forget: &LabeledDataset,
    proxy: Option<&LabeledDataset>,
    config: &CovarNavConfig,
    method: &str,
) -> Result<Unlearned> {
    let start = Instant::now();
    config.projection.validate()?;
    config.descent.validate()?;
    let cf = forget_class_of(forget)?;
    if cf >= model.num_classes() {
        return Err(Error::Label {
            label: cf,
            num_classes: model.num_classes(),
        });
    }

    let synthetic = match proxy {
        Some(_) => None,
        None => {
            let inv = InversionConfig {
                forget_class: cf,
                seed: config.seed,
                ..config.inversion.clone()
            };
            Some(invert(model, &inv)?)
        }
    };
    let proxy_set = proxy.unwrap_or_else(|| &synthetic.as_ref().expect("inverted").dataset);
    if proxy_set.labels.contains(&cf) {
        return Err(Error::ForgottenClassPresent(cf));
    }

    let relabeled = match config.strategy {
        Strategy::Entropy => None,
        s => Some(forgetting::mislabel(s, model, forget, config.seed)?),
    };
    let projection = build_projection_set(model, proxy_set, &config.projection)?;
    let objective = match &relabeled {
        Some(set) => ForgetObjective::Relabeled(set),
        None => ForgetObjective::Entropy(forget),
    };

    let cannot_forget = projection.all_empty();
    let (out, log) = if cannot_forget {
        log::warn!(
            "cannot forget: every projected layer has an empty null space at p = {}; returning the original model",
            config.projection.p
        );
        (
            model.clone(),
            DescentLog {
                epoch_loss: vec![],
                steps: 0,
                refreshes: 0,
            },
        )
    } else {
        let rebuild = |m: &ModelSnapshot| build_projection_set(m, proxy_set, &config.projection);
        let descent = DescentConfig {
            seed: config.seed,
            ..config.descent.clone()
        };
        forget_descent(
            model,
            objective,
            &descent,
            Some(&projection),
            (config.refresh_every > 0).then_some((config.refresh_every, &rebuild as Refresh<'_>)),
        )?
    };

    let details = json!({
        "strategy": config.strategy.name(),
        "p": config.projection.p,
        "rank_tol": config.projection.rank_tol,
        "proxy": {
            "source": if synthetic.is_some() { "inverted" } else { "provided" },
            "samples": proxy_set.len(),
            "fingerprint": proxy_set.fingerprint(),
        },
        "inversion_quality": synthetic.as_ref().map(|s| serde_json::to_value(&s.quality).expect("serializable")),
        "layers": projection.bases.iter().map(|b| json!({
            "layer": b.layer, "dim": b.dim, "k": b.k, "null_dim": b.null_dim(), "energy": b.energy,
        })).collect::<Vec<_>>(),
        "cannot_forget": cannot_forget,
        "epochs": config.descent.epochs,
        "lr": config.descent.lr,
        "order": config.descent.order,
        "refresh_every": config.refresh_every,
        "refreshes": log.refreshes,
        "steps": log.steps,
        "epoch_loss": log.epoch_loss,
    });
    Ok(Unlearned {
        model: out,
        summary: RunSummary {
            method: method.to_string(),
            runtime_s: start.elapsed().as_secs_f64(),
            details,
        },
        projection: Some(projection),
        synthetic,
        relabeled,
        cannot_forget,
    })
}
