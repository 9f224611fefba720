use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, LayerSpec};
use super::layers::{self, ConvGeometry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub layer: usize,
    pub kind: ParamKind,
}

impl ParamKey {
    pub fn new(layer: usize, kind: ParamKind) -> Self {
        Self { layer, kind }
    }
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer{}.{:?}", self.layer, self.kind)
    }
}

/// Parameters of one layer. Conv weights are stored as
/// `(C_out, C_in * k * k)`, the same layout the activation columns use.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv {
        weight: Array2<f64>,
        bias: Option<Array1<f64>>,
    },
    BatchNorm {
        gamma: Array1<f64>,
        beta: Array1<f64>,
        running_mean: Array1<f64>,
        running_var: Array1<f64>,
    },
    Linear {
        weight: Array2<f64>,
        bias: Option<Array1<f64>>,
    },
    Stateless,
}

/// Input to a projectable layer's weight matrix for one forward pass:
/// a `d_l x M` matrix with one activation vector per column.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub layer: usize,
    pub columns: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses the stored running statistics.
    Eval,
    /// Batch norm normalizes with batch statistics.
    Train,
}

#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Conv {
        cols: Array2<f64>,
        input_dim: (usize, usize, usize, usize),
        geometry: ConvGeometry,
    },
    BatchNorm {
        input: Array4<f64>,
        xhat: Array4<f64>,
        inv_std: Array1<f64>,
        batch_stats: bool,
    },
    Relu {
        output: Array4<f64>,
    },
    Reshape {
        input_dim: (usize, usize, usize, usize),
        pooled: bool,
    },
    Linear {
        input: Array2<f64>,
    },
}

/// Intermediate values of one forward pass, needed for backward.
#[derive(Debug, Clone)]
pub struct Tape {
    pub(crate) mode: Mode,
    pub(crate) caches: Vec<Cache>,
    /// `(layer, batch mean, biased batch variance)` for training-mode batch norm.
    pub(crate) batch_stats: Vec<(usize, Array1<f64>, Array1<f64>)>,
}

impl Tape {
    /// Inputs of every batch-norm layer, in layer order.
    pub fn batch_norm_inputs(&self) -> Vec<(usize, &Array4<f64>)> {
        self.caches
            .iter()
            .enumerate()
            .filter_map(|(i, c)| match c {
                Cache::BatchNorm { input, .. } => Some((i, input)),
                _ => None,
            })
            .collect()
    }

    pub fn activation_records(&self) -> Vec<ActivationRecord> {
        self.caches
            .iter()
            .enumerate()
            .filter_map(|(layer, c)| match c {
                Cache::Conv { cols, .. } => Some(ActivationRecord {
                    layer,
                    columns: cols.clone(),
                }),
                Cache::Linear { input } => Some(ActivationRecord {
                    layer,
                    columns: input.t().to_owned(),
                }),
                _ => None,
            })
            .collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<ParamKey, ArrayD<f64>>);

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&ArrayD<f64>> {
        self.0.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &ArrayD<f64>)> {
        self.0.iter()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (k, g) in &other.0 {
            match self.0.get_mut(k) {
                Some(acc) => *acc += g,
                None => {
                    self.0.insert(*k, g.clone());
                }
            }
        }
    }
}

#[derive(Debug, Default)]
pub(crate) struct BackwardSpec<'a> {
    pub param_grads: bool,
    pub input_grad: bool,
    /// Extra gradient w.r.t. the *input* of a layer, added on the way down.
    pub extra_input_grads: Option<&'a BTreeMap<usize, Array4<f64>>>,
}

/// Trained classifier parameters with their architecture. Public methods
/// never mutate; training produces a new snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    arch: Architecture,
    layers: Vec<LayerParams>,
}

impl ModelSnapshot {
    /// Kaiming-normal weights, zero biases, identity batch norm.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = arch.head_layer();
        let mut gaussian = |rows: usize, cols: usize, std: f64| {
            Array2::from_shape_simple_fn((rows, cols), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
        };
        let layers = arch
            .layers
            .iter()
            .enumerate()
            .map(|(i, spec)| match *spec {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    LayerParams::Conv {
                        weight: gaussian(out_channels, fan_in, (2.0 / fan_in as f64).sqrt()),
                        bias: bias.then(|| Array1::zeros(out_channels)),
                    }
                }
                LayerSpec::BatchNorm { channels, .. } => LayerParams::BatchNorm {
                    gamma: Array1::ones(channels),
                    beta: Array1::zeros(channels),
                    running_mean: Array1::zeros(channels),
                    running_var: Array1::ones(channels),
                },
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    bias,
                } => {
                    let gain = if Some(i) == head { 1.0 } else { 2.0 };
                    LayerParams::Linear {
                        weight: gaussian(out_features, in_features, (gain / in_features as f64).sqrt()),
                        bias: bias.then(|| Array1::zeros(out_features)),
                    }
                }
                _ => LayerParams::Stateless,
            })
            .collect();
        Ok(Self { arch, layers })
    }

    /// Assembles a snapshot from explicit parameters, checking every shape.
    pub fn from_parts(arch: Architecture, layers: Vec<LayerParams>) -> Result<Self> {
        arch.validate()?;
        if layers.len() != arch.layers.len() {
            return Err(Error::shape(
                format!("{} layer parameter sets", arch.layers.len()),
                layers.len(),
            ));
        }
        for (i, (spec, params)) in arch.layers.iter().zip(&layers).enumerate() {
            let ok = match (spec, params) {
                (
                    LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        bias,
                        ..
                    },
                    LayerParams::Conv { weight, bias: b },
                ) => {
                    weight.dim() == (*out_channels, in_channels * kernel * kernel)
                        && b.as_ref().map(|b| b.len()) == bias.then_some(*out_channels)
                }
                (
                    LayerSpec::Linear {
                        in_features,
                        out_features,
                        bias,
                    },
                    LayerParams::Linear { weight, bias: b },
                ) => {
                    weight.dim() == (*out_features, *in_features)
                        && b.as_ref().map(|b| b.len()) == bias.then_some(*out_features)
                }
                (
                    LayerSpec::BatchNorm { channels, .. },
                    LayerParams::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => {
                    [gamma.len(), beta.len(), running_mean.len(), running_var.len()]
                        .iter()
                        .all(|&n| n == *channels)
                        && running_var.iter().all(|&v| v >= 0.0)
                }
                (LayerSpec::Relu | LayerSpec::GlobalAvgPool | LayerSpec::Flatten, LayerParams::Stateless) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::shape(format!("parameters for layer {i} ({})", spec.name()), "mismatch"));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Weight matrix of a conv or linear layer.
    pub fn weight(&self, layer: usize) -> Option<&Array2<f64>> {
        match self.layers.get(layer)? {
            LayerParams::Conv { weight, .. } | LayerParams::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }

    /// Stored `(layer, running mean, running variance)` of every batch-norm layer.
    pub fn bn_stats(&self) -> Vec<(usize, ArrayView1<'_, f64>, ArrayView1<'_, f64>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, p)| match p {
                LayerParams::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                } => Some((i, running_mean.view(), running_var.view())),
                _ => None,
            })
            .collect()
    }

    /// Every stored tensor in a fixed order (layer, then kind).
    pub fn tensors(&self) -> Vec<(ParamKey, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, p) in self.layers.iter().enumerate() {
            match p {
                LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                    out.push((ParamKey::new(i, ParamKind::Weight), weight.view().into_dyn()));
                    if let Some(b) = bias {
                        out.push((ParamKey::new(i, ParamKind::Bias), b.view().into_dyn()));
                    }
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push((ParamKey::new(i, ParamKind::Gamma), gamma.view().into_dyn()));
                    out.push((ParamKey::new(i, ParamKind::Beta), beta.view().into_dyn()));
                    out.push((ParamKey::new(i, ParamKind::RunningMean), running_mean.view().into_dyn()));
                    out.push((ParamKey::new(i, ParamKind::RunningVar), running_var.view().into_dyn()));
                }
                LayerParams::Stateless => {}
            }
        }
        out
    }

    pub fn tensor(&self, key: ParamKey) -> Option<ArrayViewD<'_, f64>> {
        self.tensors().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    pub(crate) fn tensor_mut(&mut self, key: ParamKey) -> Option<ArrayViewMutD<'_, f64>> {
        let p = self.layers.get_mut(key.layer)?;
        Some(match (p, key.kind) {
            (LayerParams::Conv { weight, .. } | LayerParams::Linear { weight, .. }, ParamKind::Weight) => {
                weight.view_mut().into_dyn()
            }
            (LayerParams::Conv { bias: Some(b), .. } | LayerParams::Linear { bias: Some(b), .. }, ParamKind::Bias) => {
                b.view_mut().into_dyn()
            }
            (LayerParams::BatchNorm { gamma, .. }, ParamKind::Gamma) => gamma.view_mut().into_dyn(),
            (LayerParams::BatchNorm { beta, .. }, ParamKind::Beta) => beta.view_mut().into_dyn(),
            (LayerParams::BatchNorm { running_mean, .. }, ParamKind::RunningMean) => running_mean.view_mut().into_dyn(),
            (LayerParams::BatchNorm { running_var, .. }, ParamKind::RunningVar) => running_var.view_mut().into_dyn(),
            _ => return None,
        })
    }

    pub(crate) fn layer_mut(&mut self, layer: usize) -> &mut LayerParams {
        &mut self.layers[layer]
    }

    /// Keys of trainable tensors.
    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        self.tensors()
            .into_iter()
            .map(|(k, _)| k)
            .filter(|k| k.kind.is_trainable())
            .collect()
    }

    /// Largest absolute difference over all stored tensors.
    pub fn max_abs_diff(&self, other: &ModelSnapshot) -> Result<f64> {
        if self.arch != other.arch {
            return Err(Error::shape("identical architectures", "different architectures"));
        }
        Ok(self
            .tensors()
            .iter()
            .zip(other.tensors().iter())
            .map(|((_, a), (_, b))| {
                a.iter()
                    .zip(b.iter())
                    .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
            })
            .fold(0.0, f64::max))
    }

    fn check_input(&self, x: &ArrayView4<f64>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if n == 0 || [c, h, w] != self.arch.input_shape {
            return Err(Error::shape(
                format!("(N>=1, {:?})", self.arch.input_shape),
                format!("{:?}", x.dim()),
            ));
        }
        Ok(())
    }

    /// Evaluation-mode logits `(N, K)`.
    pub fn forward(&self, x: ArrayView4<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.run(x, Mode::Eval, false).0)
    }

    /// Evaluation-mode logits plus the input of every conv/linear layer.
    pub fn forward_with_activations(&self, x: ArrayView4<f64>) -> Result<(Array2<f64>, Vec<ActivationRecord>)> {
        self.check_input(&x)?;
        let (logits, tape) = self.run(x, Mode::Eval, true);
        Ok((logits, tape.expect("tape requested").activation_records()))
    }

    /// Input of the final linear layer (penultimate embedding), eval mode.
    pub fn penultimate(&self, x: ArrayView4<f64>) -> Result<Array2<f64>> {
        let head = self
            .arch
            .head_layer()
            .ok_or_else(|| Error::InvalidArgument("architecture has no linear head".into()))?;
        let (_, records) = self.forward_with_activations(x)?;
        let rec = records
            .into_iter()
            .find(|r| r.layer == head)
            .expect("head layer is recorded");
        Ok(rec.columns.t().to_owned())
    }

    pub(crate) fn forward_tape(&self, x: ArrayView4<f64>, mode: Mode) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&x)?;
        let (logits, tape) = self.run(x, mode, true);
        Ok((logits, tape.expect("tape requested")))
    }

    fn run(&self, x: ArrayView4<f64>, mode: Mode, keep: bool) -> (Array2<f64>, Option<Tape>) {
        let mut cur = x.to_owned();
        let mut caches = Vec::new();
        let mut batch_stats = Vec::new();
        for (i, (spec, params)) in self.arch.layers.iter().zip(&self.layers).enumerate() {
            let (next, cache) = match (spec, params) {
                (
                    &LayerSpec::Conv {
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    LayerParams::Conv { weight, bias },
                ) => {
                    let g = ConvGeometry { kernel, stride, padding };
                    let dim = cur.dim();
                    let (oh, ow) = g.output_hw(dim.2, dim.3);
                    let cols = layers::im2col(cur.view(), g);
                    let out = layers::unflatten_output(&weight.dot(&cols), dim.0, oh, ow, bias.as_ref());
                    (out, keep.then(|| Cache::Conv { cols, input_dim: dim, geometry: g }))
                }
                (
                    &LayerSpec::BatchNorm { eps, .. },
                    LayerParams::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => {
                    let (mean, var) = match mode {
                        Mode::Eval => (running_mean.clone(), running_var.clone()),
                        Mode::Train => {
                            let (m, v) = layers::channel_stats(cur.view());
                            batch_stats.push((i, m.clone(), v.clone()));
                            (m, v)
                        }
                    };
                    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
                    let (y, xhat) = layers::batch_norm_apply(cur.view(), mean.view(), inv_std.view(), gamma.view(), beta.view());
                    let cache = keep.then(|| Cache::BatchNorm {
                        input: std::mem::take(&mut cur),
                        xhat,
                        inv_std,
                        batch_stats: mode == Mode::Train,
                    });
                    (y, cache)
                }
                (LayerSpec::Relu, _) => {
                    cur.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
                    let cache = keep.then(|| Cache::Relu { output: cur.clone() });
                    (cur, cache)
                }
                (LayerSpec::GlobalAvgPool, _) => {
                    let dim = cur.dim();
                    (layers::global_avg_pool(cur.view()), keep.then_some(Cache::Reshape { input_dim: dim, pooled: true }))
                }
                (LayerSpec::Flatten, _) => {
                    let dim = cur.dim();
                    let flat = cur
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((dim.0, dim.1 * dim.2 * dim.3, 1, 1))
                        .expect("contiguous");
                    (flat, keep.then_some(Cache::Reshape { input_dim: dim, pooled: false }))
                }
                (LayerSpec::Linear { out_features, .. }, LayerParams::Linear { weight, bias }) => {
                    let n = cur.dim().0;
                    let input = cur
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((n, weight.ncols()))
                        .expect("linear input is (N, F, 1, 1)");
                    let mut out = input.dot(&weight.t());
                    if let Some(b) = bias {
                        out += b;
                    }
                    let out4 = out
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((n, *out_features, 1, 1))
                        .expect("contiguous");
                    (out4, keep.then_some(Cache::Linear { input }))
                }
                _ => unreachable!("parameters validated against architecture"),
            };
            cur = next;
            if let Some(c) = cache {
                caches.push(c);
            }
        }
        let n = cur.dim().0;
        let logits = cur
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, self.arch.num_classes))
            .expect("validated final shape")
            .into_dimensionality::<Ix2>()
            .expect("2-d");
        let tape = keep.then_some(Tape { mode, caches, batch_stats });
        (logits, tape)
    }

    /// Backpropagates `grad_logits` through `tape`.
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        grad_logits: ArrayView2<f64>,
        spec: BackwardSpec<'_>,
    ) -> (Gradients, Option<Array4<f64>>) {
        let (n, k) = grad_logits.dim();
        let mut grads = Gradients::default();
        let mut d = grad_logits.as_standard_layout().into_owned().into_shape_with_order((n, k, 1, 1)).expect("contiguous");
        for i in (0..self.layers.len()).rev() {
            let need_dx = i > 0 || spec.input_grad;
            let cache = &tape.caches[i];
            let params = &self.layers[i];
            let dx = match (cache, params) {
                (Cache::Conv { cols, input_dim, geometry }, LayerParams::Conv { weight, bias }) => {
                    let dy = layers::flatten_output(d.view());
                    if spec.param_grads {
                        grads.0.insert(ParamKey::new(i, ParamKind::Weight), dy.dot(&cols.t()).into_dyn());
                        if bias.is_some() {
                            grads.0.insert(ParamKey::new(i, ParamKind::Bias), dy.sum_axis(Axis(1)).into_dyn());
                        }
                    }
                    need_dx.then(|| layers::col2im(weight.t().dot(&dy).view(), *input_dim, *geometry))
                }
                (Cache::BatchNorm { xhat, inv_std, batch_stats, .. }, LayerParams::BatchNorm { gamma, .. }) => {
                    let (dx, dgamma, dbeta) = if *batch_stats {
                        layers::batch_norm_backward_batch(d.view(), xhat.view(), inv_std.view(), gamma.view())
                    } else {
                        layers::batch_norm_backward_frozen(d.view(), xhat.view(), inv_std.view(), gamma.view())
                    };
                    if spec.param_grads {
                        grads.0.insert(ParamKey::new(i, ParamKind::Gamma), dgamma.into_dyn());
                        grads.0.insert(ParamKey::new(i, ParamKind::Beta), dbeta.into_dyn());
                    }
                    Some(dx)
                }
                (Cache::Relu { output }, _) => {
                    ndarray::Zip::from(&mut d).and(output).for_each(|g, &o| {
                        if o <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    Some(std::mem::take(&mut d))
                }
                (Cache::Reshape { input_dim, pooled: true }, _) => {
                    Some(layers::global_avg_pool_backward(d.view(), *input_dim))
                }
                (Cache::Reshape { input_dim, pooled: false }, _) => Some(
                    d.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(*input_dim)
                        .expect("contiguous"),
                ),
                (Cache::Linear { input }, LayerParams::Linear { weight, bias }) => {
                    let rows = d.dim().0;
                    let dy = d
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((rows, weight.nrows()))
                        .expect("contiguous");
                    if spec.param_grads {
                        grads.0.insert(ParamKey::new(i, ParamKind::Weight), dy.t().dot(input).into_dyn());
                        if bias.is_some() {
                            grads.0.insert(ParamKey::new(i, ParamKind::Bias), dy.sum_axis(Axis(0)).into_dyn());
                        }
                    }
                    need_dx.then(|| {
                        dy.dot(weight)
                            .as_standard_layout()
                            .into_owned()
                            .into_shape_with_order((rows, weight.ncols(), 1, 1))
                            .expect("contiguous")
                    })
                }
                _ => unreachable!("tape built by this model"),
            };
            let Some(mut dx) = dx else {
                break;
            };
            if let Some(extra) = spec.extra_input_grads.and_then(|m| m.get(&i)) {
                dx += extra;
            }
            d = dx;
        }
        let input_grad = spec.input_grad.then_some(d);
        (grads, input_grad)
    }
}
