//! Conditioner network `h = NN(x_pass, g(y))` and the conditional-input
//! encoder `g`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Axis, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Tanh => v.tanh(),
        }
    }

    fn on_tape<T: Scalar>(self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpConfig {
    /// Four hidden layers of width 64 with rectifiers.
    pub fn toy(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths: vec![64; 4],
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Config(format!(
                "MLP dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in self.hidden_widths.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }
}

/// Fully connected layer, `x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    config: MlpConfig,
    layers: Vec<Dense<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Hidden layers get He-uniform weights and zero bias; the output layer
    /// is all zeros so the network initially emits a constant.
    pub fn new<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                let mut weight = Tensor::zeros(fan_in, fan_out);
                if i < last {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    for w in weight.data_mut() {
                        *w = T::lit(rng.random_range(-bound..bound));
                    }
                }
                Dense {
                    weight,
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Rebuilds a network from stored layers, checking that shapes chain.
    pub fn from_layers(config: MlpConfig, layers: Vec<Dense<T>>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::DimMismatch {
                expected: dims.len(),
                got: layers.len(),
            });
        }
        for (&(i, o), l) in dims.iter().zip(&layers) {
            if l.weight.shape() != [i, o] || l.bias.shape() != [1, o] {
                return Err(Error::ShapeMismatch {
                    op: "mlp layer",
                    left: [i, o],
                    right: l.weight.shape(),
                });
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    /// Batched forward pass over the rows of `input`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        if input.cols() != self.config.input_dim {
            return Err(Error::DimMismatch {
                expected: self.config.input_dim,
                got: input.cols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add_row(&layer.bias)?;
            if i < last {
                let act = self.config.activation;
                h = h.map(|v| act.apply(v));
            }
        }
        Ok(h)
    }

    /// `h = NN(x_pass, y_encoded)` for a single sample.
    pub fn conditioner_forward(&self, x_pass: &[T], y_encoded: &[T]) -> Result<Vec<T>> {
        let got = x_pass.len() + y_encoded.len();
        if got != self.config.input_dim {
            return Err(Error::DimMismatch {
                expected: self.config.input_dim,
                got,
            });
        }
        let mut row = x_pass.to_vec();
        row.extend_from_slice(y_encoded);
        Ok(self.forward(&Tensor::row(row))?.into_data())
    }

    /// Records the forward pass, registering weights as `{prefix}.{i}.weight`
    /// and `{prefix}.{i}.bias`.
    pub fn forward_on_tape(&self, g: &mut Graph<T>, input: NodeId, prefix: &str) -> Result<NodeId> {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.parameter(format!("{prefix}.{i}.weight"), layer.weight.clone());
            let b = g.parameter(format!("{prefix}.{i}.bias"), layer.bias.clone());
            let xw = g.matmul(h, w)?;
            h = g.add(xw, b)?;
            if i < last {
                h = self.config.activation.on_tape(g, h)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &l.weight),
                    (format!("{prefix}.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &mut l.weight),
                    (format!("{prefix}.{i}.bias"), &mut l.bias),
                ]
            })
            .collect()
    }
}

/// The conditional-input encoder `g`.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder<T> {
    Identity { dim: usize },
    Mlp(Mlp<T>),
}

impl<T: Scalar> Encoder<T> {
    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Mlp(m) => m.config().input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Mlp(m) => m.config().output_dim,
        }
    }

    /// Encodes a batch of conditional inputs, one per row.
    pub fn encode(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        if y.cols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                got: y.cols(),
            });
        }
        match self {
            Encoder::Identity { .. } => Ok(y.clone()),
            Encoder::Mlp(m) => m.forward(y),
        }
    }

    pub fn encode_one(&self, y: &[T]) -> Result<Vec<T>> {
        Ok(self.encode(&Tensor::row(y.to_vec()))?.into_data())
    }

    pub fn forward_on_tape(&self, g: &mut Graph<T>, y: NodeId) -> Result<NodeId> {
        match self {
            Encoder::Identity { .. } => Ok(y),
            Encoder::Mlp(m) => m.forward_on_tape(g, y, "encoder"),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Encoder::Identity { .. } => Vec::new(),
            Encoder::Mlp(m) => m.params("encoder"),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            Encoder::Identity { .. } => Vec::new(),
            Encoder::Mlp(m) => m.params_mut("encoder"),
        }
    }
}

/// Concatenates pass-through coordinates and encoded conditions on the tape.
pub(crate) fn conditioner_input<T: Scalar>(
    g: &mut Graph<T>,
    x_pass: Option<NodeId>,
    y_encoded: NodeId,
) -> Result<NodeId> {
    match x_pass {
        Some(x) => g.concat(&[x, y_encoded], Axis::Cols),
        None => Ok(y_encoded),
    }
}
