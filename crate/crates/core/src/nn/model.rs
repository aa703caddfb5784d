use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        outputs: usize,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(outputs: usize, activation: Activation) -> Self {
        LayerSpec { kind: LayerKind::Dense { outputs }, activation }
    }

    pub fn conv(out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d { out_channels, kernel, stride },
            activation: Activation::Relu,
        }
    }

    pub fn max_pool(kernel: usize, stride: usize) -> Self {
        LayerSpec { kind: LayerKind::MaxPool2d { kernel, stride }, activation: Activation::None }
    }

    pub fn flatten() -> Self {
        LayerSpec { kind: LayerKind::Flatten, activation: Activation::None }
    }
}

/// Channel-height-width shape of one sample. Flat feature vectors are `(n, 1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }

    pub const fn flat(features: usize) -> Self {
        Shape { channels: features, height: 1, width: 1 }
    }

    pub fn features(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_flat(&self) -> bool {
        self.height == 1 && self.width == 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// 784-300-100-10 fully connected network.
    pub fn lenet300() -> Self {
        ModelConfig {
            name: "lenet300".into(),
            input: Shape::new(1, 28, 28),
            layers: vec![
                LayerSpec::flatten(),
                LayerSpec::dense(300, Activation::Relu),
                LayerSpec::dense(100, Activation::Relu),
                LayerSpec::dense(10, Activation::None),
            ],
        }
    }

    /// Caffe variant of LeNet-5: conv 20@5x5, pool, conv 50@5x5, pool, dense 500, dense 10.
    pub fn lenet5() -> Self {
        ModelConfig {
            name: "lenet5".into(),
            input: Shape::new(1, 28, 28),
            layers: vec![
                LayerSpec::conv(20, 5, 1),
                LayerSpec::max_pool(2, 2),
                LayerSpec::conv(50, 5, 1),
                LayerSpec::max_pool(2, 2),
                LayerSpec::flatten(),
                LayerSpec::dense(500, Activation::Relu),
                LayerSpec::dense(10, Activation::None),
            ],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "lenet300" => Some(Self::lenet300()),
            "lenet5" => Some(Self::lenet5()),
            _ => None,
        }
    }

    /// Fully connected network over a flat input, ReLU on every hidden layer.
    pub fn mlp(name: &str, inputs: usize, hidden: &[usize], outputs: usize) -> Self {
        let mut layers: Vec<LayerSpec> =
            hidden.iter().map(|&h| LayerSpec::dense(h, Activation::Relu)).collect();
        layers.push(LayerSpec::dense(outputs, Activation::None));
        ModelConfig { name: name.into(), input: Shape::flat(inputs), layers }
    }

    /// Input and output shape of every layer, after checking that the stack is consistent.
    pub fn resolve_shapes(&self) -> Result<Vec<(Shape, Shape)>> {
        if self.layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        if self.input.features() == 0 {
            return Err(Error::Model("input shape has zero features".into()));
        }
        let last = self.layers.len() - 1;
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, spec) in self.layers.iter().enumerate() {
            let dim_err = |detail: String| Error::Dimension { layer: l, detail };
            let next = match spec.kind {
                LayerKind::Dense { outputs } => {
                    if !shape.is_flat() {
                        return Err(dim_err(format!(
                            "dense layer needs a flat input, got {}x{}x{}",
                            shape.channels, shape.height, shape.width
                        )));
                    }
                    if outputs == 0 {
                        return Err(dim_err("dense layer with zero outputs".into()));
                    }
                    Shape::flat(outputs)
                }
                LayerKind::Conv2d { out_channels, kernel, stride } => {
                    window_output(shape, kernel, stride).map_err(dim_err).map(|(h, w)| {
                        Shape::new(out_channels, h, w)
                    })?
                }
                LayerKind::MaxPool2d { kernel, stride } => window_output(shape, kernel, stride)
                    .map_err(dim_err)
                    .map(|(h, w)| Shape::new(shape.channels, h, w))?,
                LayerKind::Flatten => Shape::flat(shape.features()),
            };
            if let LayerKind::Conv2d { out_channels: 0, .. } = spec.kind {
                return Err(dim_err("convolution with zero output channels".into()));
            }
            match (&spec.kind, spec.activation, l == last) {
                (LayerKind::Dense { .. }, Activation::None, true) => {}
                (_, _, true) => {
                    return Err(Error::Model(
                        "the output layer must be dense with no activation (logits)".into(),
                    ))
                }
                (k, Activation::Relu, false) if k.has_params() => {}
                (k, Activation::None, false) if k.has_params() => {
                    return Err(Error::Model(format!(
                        "layer {l}: only the output layer may omit the ReLU"
                    )))
                }
                (_, Activation::None, false) => {}
                (_, Activation::Relu, false) => {
                    return Err(Error::Model(format!(
                        "layer {l}: pooling and flatten layers carry no activation"
                    )))
                }
            }
            out.push((shape, next));
            shape = next;
        }
        Ok(out)
    }
}

fn window_output(shape: Shape, kernel: usize, stride: usize) -> std::result::Result<(usize, usize), String> {
    if kernel == 0 || stride == 0 {
        return Err("kernel and stride must be positive".into());
    }
    if kernel > shape.height || kernel > shape.width {
        return Err(format!(
            "kernel {kernel} larger than input {}x{}",
            shape.height, shape.width
        ));
    }
    Ok(((shape.height - kernel) / stride + 1, (shape.width - kernel) / stride + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet5_shapes() {
        let shapes = ModelConfig::lenet5().resolve_shapes().unwrap();
        assert_eq!(shapes[0].1, Shape::new(20, 24, 24));
        assert_eq!(shapes[1].1, Shape::new(20, 12, 12));
        assert_eq!(shapes[2].1, Shape::new(50, 8, 8));
        assert_eq!(shapes[3].1, Shape::new(50, 4, 4));
        assert_eq!(shapes[4].1, Shape::flat(800));
        assert_eq!(shapes[6].1, Shape::flat(10));
    }

    #[test]
    fn dense_on_image_is_rejected_naming_layer() {
        let cfg = ModelConfig {
            name: "bad".into(),
            input: Shape::new(1, 4, 4),
            layers: vec![LayerSpec::dense(3, Activation::None)],
        };
        match cfg.resolve_shapes() {
            Err(Error::Dimension { layer: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn output_layer_must_be_linear() {
        let mut cfg = ModelConfig::mlp("m", 4, &[3], 2);
        cfg.layers.last_mut().unwrap().activation = Activation::Relu;
        assert!(matches!(cfg.resolve_shapes(), Err(Error::Model(_))));
        let mut cfg = ModelConfig::mlp("m", 4, &[3], 2);
        cfg.layers[0].activation = Activation::None;
        assert!(matches!(cfg.resolve_shapes(), Err(Error::Model(_))));
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = ModelConfig::lenet5();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"kind\":\"conv2d\""));
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
