use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square kernel, stride 1, same padding.
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    },
    /// Flattens its (channel-major) input.
    Fc { inputs: usize, outputs: usize },
    Relu,
    /// 2x2 window, stride 2.
    MaxPool,
    BatchNorm { channels: usize },
    Dropout { rate: f32 },
    Softmax,
}

impl LayerSpec {
    pub fn is_linear(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::BatchNorm { .. } => "bn",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// Activation shape `[channels, height, width]`; FC outputs are `[n, 1, 1]`.
pub type Shape = [usize; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// conv3x3-32, pool, conv3x3-64, pool, FC-10 on 28x28x1 inputs.
    pub fn mnist_cnn() -> Self {
        use LayerSpec::*;
        Self {
            input_shape: [1, 28, 28],
            layers: vec![
                Conv {
                    kernel: 3,
                    in_channels: 1,
                    out_channels: 32,
                },
                Relu,
                MaxPool,
                Conv {
                    kernel: 3,
                    in_channels: 32,
                    out_channels: 64,
                },
                Relu,
                MaxPool,
                Fc { inputs: 64 * 7 * 7, outputs: 10 },
                Softmax,
            ],
        }
    }

    /// Six batch-normalized 3x3 conv layers in three pooled stages, then
    /// FC-128, dropout 0.5 and FC-10, on 32x32x3 inputs.
    pub fn cifar_cnn() -> Self {
        use LayerSpec::*;
        let mut layers = Vec::new();
        let mut c = 3;
        for out in [32, 64, 128] {
            for _ in 0..2 {
                layers.push(Conv {
                    kernel: 3,
                    in_channels: c,
                    out_channels: out,
                });
                layers.push(BatchNorm { channels: out });
                layers.push(Relu);
                c = out;
            }
            layers.push(MaxPool);
        }
        layers.extend([
            Fc { inputs: 128 * 4 * 4, outputs: 128 },
            Relu,
            Dropout { rate: 0.5 },
            Fc { inputs: 128, outputs: 10 },
            Softmax,
        ]);
        Self {
            input_shape: [3, 32, 32],
            layers,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "mnist-cnn" => Some(Self::mnist_cnn()),
            "cifar-cnn" => Some(Self::cifar_cnn()),
            _ => None,
        }
    }

    /// Activation shape after every layer; checks that dimensions chain.
    pub fn shapes(&self) -> Result<Vec<Shape>, NnError> {
        let mut shape = self.input_shape;
        let mut out = Vec::with_capacity(self.layers.len());
        let mismatch = |i: usize, expected: String, found: Shape| NnError::ShapeMismatch {
            context: format!("layer {i}"),
            expected,
            found: format!("{found:?}"),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                } => {
                    if kernel % 2 == 0 {
                        return Err(NnError::InvalidSpec(format!("layer {i}: kernel {kernel} must be odd")));
                    }
                    if shape[0] != in_channels {
                        return Err(mismatch(i, format!("{in_channels} input channels"), shape));
                    }
                    [out_channels, shape[1], shape[2]]
                }
                LayerSpec::Fc { inputs, outputs } => {
                    if shape.iter().product::<usize>() != inputs {
                        return Err(mismatch(i, format!("{inputs} inputs"), shape));
                    }
                    [outputs, 1, 1]
                }
                LayerSpec::BatchNorm { channels } => {
                    if shape[0] != channels {
                        return Err(mismatch(i, format!("{channels} channels"), shape));
                    }
                    shape
                }
                LayerSpec::MaxPool => {
                    if shape[1] < 2 || shape[2] < 2 {
                        return Err(mismatch(i, "spatial size >= 2".into(), shape));
                    }
                    [shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(NnError::InvalidSpec(format!("layer {i}: dropout rate {rate}")));
                    }
                    shape
                }
                LayerSpec::Relu | LayerSpec::Softmax => shape,
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.shapes()?;
        match self.layers.last() {
            Some(LayerSpec::Softmax) => {}
            _ => return Err(NnError::InvalidSpec("last layer must be softmax".into())),
        }
        if self.layers[..self.layers.len() - 1].contains(&LayerSpec::Softmax) {
            return Err(NnError::InvalidSpec("softmax only allowed as the last layer".into()));
        }
        Ok(())
    }

    pub fn class_count(&self) -> Result<usize, NnError> {
        Ok(self.shapes()?.last().map(|s| s[0]).unwrap_or(0))
    }

    /// Indices of the Conv and FC layers.
    pub fn linear_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_linear()).map(|(i, _)| i).collect()
    }

    /// Parses and validates a JSON description.
    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| NnError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}
