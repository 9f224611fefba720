use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    GlobalAvgPool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
}

impl LayerSpec {
    /// Conv and linear layers carry the weight matrices that get projected.
    pub fn is_projectable(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Linear { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
        }
    }
}

/// Sequential classifier layout. Activations between layers are always
/// `(N, C, H, W)`; linear layers see `(N, F, 1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Conv blocks `conv3x3 -> BN -> ReLU`, the first at stride 1 and the
    /// rest at stride 2, then global average pooling and one linear head.
    pub fn desk_cnn(input_shape: [usize; 3], widths: &[usize], num_classes: usize) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::InvalidArgument("desk_cnn needs at least one conv block".into()));
        }
        let mut layers = Vec::new();
        let mut in_channels = input_shape[0];
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerSpec::Conv {
                in_channels,
                out_channels: w,
                kernel: 3,
                stride: if i == 0 { 1 } else { 2 },
                padding: 1,
                bias: false,
            });
            layers.push(LayerSpec::BatchNorm {
                channels: w,
                eps: 1e-5,
                momentum: 0.1,
            });
            layers.push(LayerSpec::Relu);
            in_channels = w;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Linear {
            in_features: in_channels,
            out_features: num_classes,
            bias: true,
        });
        let arch = Self {
            input_shape,
            num_classes,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Output `(C, H, W)` of every layer; fails on inconsistent shapes.
    pub fn validate(&self) -> Result<Vec<[usize; 3]>> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        let mut shape = self.input_shape;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let [c, h, w] = shape;
            shape = match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if in_channels != c || kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(Error::shape(
                            format!("layer {i}: conv over {in_channels} channels"),
                            format!("input {shape:?}"),
                        ));
                    }
                    [
                        out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ]
                }
                LayerSpec::BatchNorm { channels, .. } => {
                    if channels != c {
                        return Err(Error::shape(
                            format!("layer {i}: batch norm over {channels} channels"),
                            format!("input {shape:?}"),
                        ));
                    }
                    shape
                }
                LayerSpec::Relu => shape,
                LayerSpec::GlobalAvgPool => [c, 1, 1],
                LayerSpec::Flatten => [c * h * w, 1, 1],
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if h != 1 || w != 1 || in_features != c {
                        return Err(Error::shape(
                            format!("layer {i}: linear over {in_features} features"),
                            format!("input {shape:?}"),
                        ));
                    }
                    [out_features, 1, 1]
                }
            };
            shapes.push(shape);
        }
        if shape != [self.num_classes, 1, 1] {
            return Err(Error::shape(
                format!("logits of {} classes", self.num_classes),
                format!("final shape {shape:?}"),
            ));
        }
        Ok(shapes)
    }

    pub fn projectable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_projectable()).collect()
    }

    pub fn batch_norm_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], LayerSpec::BatchNorm { .. }))
            .collect()
    }

    /// Index of the final linear layer; its input is the penultimate embedding.
    pub fn head_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, LayerSpec::Linear { .. }))
    }

    /// Row dimension `d_l` of the layer-input matrix for a projectable layer.
    pub fn layer_input_dim(&self, layer: usize) -> Option<usize> {
        match self.layers.get(layer)? {
            LayerSpec::Conv {
                in_channels, kernel, ..
            } => Some(in_channels * kernel * kernel),
            LayerSpec::Linear { in_features, .. } => Some(*in_features),
            _ => None,
        }
    }
}
