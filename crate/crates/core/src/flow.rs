//! Conditional flow `z = f(x; y)`: a stack of activation-normalization,
//! invertible linear and conditional coupling layers.
//!
//! Two evaluation routes exist. The batched value route (`forward_batch`,
//! `inverse_batch`) is used for sampling, scoring and diagnostics; the tape
//! route (`log_prob_on_tape`) records the density direction for training.
//! Both compute the same numbers and are tested against each other.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioner::{conditioner_input, Activation, Encoder, Mlp, MlpConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Axis, Graph, NodeId, Tensor};
use crate::transforms::graph::forward_on_tape;
use crate::transforms::{Direction, ScaleVariant, TransformKind};

/// Floor applied to the batch standard deviation during actnorm init.
pub const ACTNORM_STD_FLOOR: f64 = 1e-6;

/// Per-dimension `y = (x + bias) * exp(log_scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm<T> {
    pub log_scale: Tensor<T>,
    pub bias: Tensor<T>,
    pub initialized: bool,
}

impl<T: Scalar> ActNorm<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            log_scale: Tensor::zeros(1, dim),
            bias: Tensor::zeros(1, dim),
            initialized: false,
        }
    }

    fn log_det(&self) -> T {
        self.log_scale.sum()
    }
}

/// `z = x M` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixer<T> {
    pub weight: Tensor<T>,
    /// Frozen mixers are constants on the tape and are never updated.
    pub frozen: bool,
}

impl<T: Scalar> Mixer<T> {
    fn log_abs_det(&self) -> Result<T> {
        Ok(linalg::det(&self.weight)?.abs().ln())
    }
}

/// Passes `x_{1..split-1}` through and transforms `x_{split..D}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling<T> {
    /// One-based index of the first transformed coordinate.
    pub split: usize,
    pub kind: TransformKind,
    pub net: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    ActNorm(ActNorm<T>),
    Mixer(Mixer<T>),
    Coupling(Coupling<T>),
}

impl<T: Scalar> Layer<T> {
    fn short_label(&self) -> &'static str {
        match self {
            Layer::ActNorm(_) => "AN",
            Layer::Mixer(_) => "IC",
            Layer::Coupling(c) => c.kind.label(),
        }
    }
}

/// Order of the three layers inside one flow step (density direction).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    /// actnorm, then invertible linear, then coupling
    ActnormMixerCoupling,
    /// coupling, then invertible linear, then actnorm
    CouplingMixerActnorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerInit {
    /// Uniformly random rotation (determinant +1).
    Rotation,
    Identity,
}

/// Architecture of a flow. Everything needed to rebuild the layer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dim: usize,
    pub cond_dim: usize,
    pub steps: usize,
    pub transform: TransformKind,
    pub split: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub layer_order: LayerOrder,
    pub mixer_init: MixerInit,
    pub freeze_mixers: bool,
    pub use_actnorm: bool,
    pub use_mixer: bool,
    pub base_sigma: f64,
}

impl FlowConfig {
    /// Four steps on a 2D problem with a 2D condition and 4x64 conditioners.
    pub fn toy(transform: TransformKind) -> Self {
        Self {
            dim: 2,
            cond_dim: 2,
            steps: 4,
            transform,
            split: 2,
            hidden_widths: vec![64; 4],
            activation: Activation::Relu,
            layer_order: LayerOrder::ActnormMixerCoupling,
            mixer_init: MixerInit::Rotation,
            freeze_mixers: false,
            use_actnorm: true,
            use_mixer: true,
            base_sigma: 1.0,
        }
    }

    pub fn toy_affine(variant: ScaleVariant) -> Self {
        Self::toy(TransformKind::Affine { variant })
    }

    /// A single coupling layer and nothing else.
    pub fn single_coupling(transform: TransformKind) -> Self {
        Self {
            steps: 1,
            use_actnorm: false,
            use_mixer: false,
            ..Self::toy(transform)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.steps == 0 {
            return bad("dim and steps must be positive".into());
        }
        if self.split == 0 || self.split > self.dim {
            return bad(format!("split must be in 1..={}, got {}", self.dim, self.split));
        }
        if !(self.base_sigma > 0.0) {
            return bad(format!("base_sigma must be positive, got {}", self.base_sigma));
        }
        if self.use_mixer && self.dim != 2 {
            return bad("invertible linear layers are implemented for D = 2".into());
        }
        if let TransformKind::Spline(cfg) = self.transform {
            cfg.validate()?;
        }
        Ok(())
    }

    fn coupling_mlp(&self) -> MlpConfig {
        let n_pass = self.split - 1;
        let n_trans = self.dim - n_pass;
        MlpConfig {
            input_dim: n_pass + self.cond_dim,
            hidden_widths: self.hidden_widths.clone(),
            output_dim: self.transform.arity() * n_trans,
            activation: self.activation,
        }
    }
}

/// Output of a batched pass.
#[derive(Clone, Debug)]
pub struct Pass<T> {
    pub output: Tensor<T>,
    /// Per-row log-determinant of the map that was applied.
    pub logdet: Vec<T>,
    /// First layer (in application order) whose output held a non-finite
    /// value, if any.
    pub nonfinite_layer: Option<usize>,
    /// Features at every layer boundary, input first, when requested.
    pub features: Option<Vec<Tensor<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T> {
    config: FlowConfig,
    layers: Vec<Layer<T>>,
    encoder: Encoder<T>,
}

impl<T: Scalar> FlowModel<T> {
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        for _ in 0..config.steps {
            let actnorm = config
                .use_actnorm
                .then(|| Layer::ActNorm(ActNorm::identity(config.dim)));
            let mixer = config.use_mixer.then(|| {
                let weight = match config.mixer_init {
                    MixerInit::Rotation => random_rotation(rng),
                    MixerInit::Identity => Tensor::identity(config.dim),
                };
                Layer::Mixer(Mixer {
                    weight,
                    frozen: config.freeze_mixers,
                })
            });
            let coupling = Layer::Coupling(Coupling {
                split: config.split,
                kind: config.transform,
                net: Mlp::new(config.coupling_mlp(), rng)?,
            });
            let step: Vec<Layer<T>> = match config.layer_order {
                LayerOrder::ActnormMixerCoupling => {
                    actnorm.into_iter().chain(mixer).chain([coupling]).collect()
                }
                LayerOrder::CouplingMixerActnorm => {
                    [coupling].into_iter().chain(mixer).chain(actnorm).collect()
                }
            };
            layers.extend(step);
        }
        Ok(Self {
            encoder: Encoder::Identity {
                dim: config.cond_dim,
            },
            config,
            layers,
        })
    }

    /// Reassembles a model from stored parts, validating every shape.
    pub fn from_parts(config: FlowConfig, layers: Vec<Layer<T>>, encoder: Encoder<T>) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        if encoder.output_dim() != config.cond_dim {
            return Err(Error::DimMismatch {
                expected: config.cond_dim,
                got: encoder.output_dim(),
            });
        }
        for layer in &layers {
            match layer {
                Layer::ActNorm(a) => {
                    if a.log_scale.shape() != [1, d] || a.bias.shape() != [1, d] {
                        return Err(Error::DimMismatch {
                            expected: d,
                            got: a.log_scale.cols(),
                        });
                    }
                }
                Layer::Mixer(m) => {
                    if m.weight.shape() != [d, d] {
                        return Err(Error::DimMismatch {
                            expected: d,
                            got: m.weight.rows(),
                        });
                    }
                    if linalg::det(&m.weight)? == T::zero() {
                        return Err(Error::Singular("mixer"));
                    }
                }
                Layer::Coupling(c) => {
                    if c.split == 0 || c.split > d {
                        return Err(Error::Config(format!("bad split {}", c.split)));
                    }
                    let want_out = c.kind.arity() * (d - c.split + 1);
                    let want_in = c.split - 1 + config.cond_dim;
                    let cfg = c.net.config();
                    if cfg.output_dim != want_out || cfg.input_dim != want_in {
                        return Err(Error::DimMismatch {
                            expected: want_out,
                            got: cfg.output_dim,
                        });
                    }
                }
            }
        }
        Ok(Self {
            config,
            layers,
            encoder,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn encoder(&self) -> &Encoder<T> {
        &self.encoder
    }

    pub fn base_sigma(&self) -> T {
        T::lit(self.config.base_sigma)
    }

    /// Labels like `AN1`, `IC1`, `Aff1`, numbered by step in density order.
    pub fn layer_labels(&self) -> Vec<String> {
        let mut counts = std::collections::HashMap::new();
        self.layers
            .iter()
            .map(|l| {
                let base = l.short_label();
                let c = counts.entry(base).or_insert(0usize);
                *c += 1;
                format!("{base}{c}")
            })
            .collect()
    }

    /// Trainable parameters in a fixed order, named as on the tape.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::ActNorm(a) => {
                    out.push((format!("layers.{i}.log_scale"), &a.log_scale));
                    out.push((format!("layers.{i}.bias"), &a.bias));
                }
                Layer::Mixer(m) => {
                    if !m.frozen {
                        out.push((format!("layers.{i}.weight"), &m.weight));
                    }
                }
                Layer::Coupling(c) => out.extend(c.net.params(&format!("layers.{i}.net"))),
            }
        }
        out.extend(self.encoder.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::ActNorm(a) => {
                    out.push((format!("layers.{i}.log_scale"), &mut a.log_scale));
                    out.push((format!("layers.{i}.bias"), &mut a.bias));
                }
                Layer::Mixer(m) => {
                    if !m.frozen {
                        out.push((format!("layers.{i}.weight"), &mut m.weight));
                    }
                }
                Layer::Coupling(c) => out.extend(c.net.params_mut(&format!("layers.{i}.net"))),
            }
        }
        out.extend(self.encoder.params_mut());
        out
    }

    /// Every stored tensor, trainable or frozen, with its parameter name.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::ActNorm(a) => {
                    out.push((format!("layers.{i}.log_scale"), &a.log_scale));
                    out.push((format!("layers.{i}.bias"), &a.bias));
                }
                Layer::Mixer(m) => out.push((format!("layers.{i}.weight"), &m.weight)),
                Layer::Coupling(c) => out.extend(c.net.params(&format!("layers.{i}.net"))),
            }
        }
        out.extend(self.encoder.params());
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::ActNorm(a) => {
                    out.push((format!("layers.{i}.log_scale"), &mut a.log_scale));
                    out.push((format!("layers.{i}.bias"), &mut a.bias));
                }
                Layer::Mixer(m) => out.push((format!("layers.{i}.weight"), &mut m.weight)),
                Layer::Coupling(c) => out.extend(c.net.params_mut(&format!("layers.{i}.net"))),
            }
        }
        out.extend(self.encoder.params_mut());
        out
    }

    /// Replaces the condition encoder. Its output width must match `cond_dim`.
    pub fn set_encoder(&mut self, encoder: Encoder<T>) -> Result<()> {
        if encoder.output_dim() != self.config.cond_dim {
            return Err(Error::DimMismatch {
                expected: self.config.cond_dim,
                got: encoder.output_dim(),
            });
        }
        self.encoder = encoder;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_batch(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        if y.cols() != self.encoder.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.encoder.input_dim(),
                got: y.cols(),
            });
        }
        if x.rows() != y.rows() {
            return Err(Error::DimMismatch {
                expected: x.rows(),
                got: y.rows(),
            });
        }
        Ok(())
    }

    fn apply_layer(
        &self,
        layer: &Layer<T>,
        x: &Tensor<T>,
        y_enc: &Tensor<T>,
        direction: Direction,
        logdet: &mut [T],
    ) -> Result<Tensor<T>> {
        let n = x.rows();
        match layer {
            Layer::ActNorm(a) => {
                let ld = a.log_det();
                let scale = a.log_scale.map(T::exp);
                let mut out = x.clone();
                for r in 0..n {
                    for (c, v) in out.row_slice_mut(r).iter_mut().enumerate() {
                        let (s, b) = (scale.get(0, c), a.bias.get(0, c));
                        *v = match direction {
                            Direction::Forward => (*v + b) * s,
                            Direction::Inverse => *v / s - b,
                        };
                    }
                }
                let signed = if direction == Direction::Forward { ld } else { -ld };
                logdet.iter_mut().for_each(|l| *l += signed);
                Ok(out)
            }
            Layer::Mixer(m) => {
                let ld = m.log_abs_det()?;
                let out = match direction {
                    Direction::Forward => x.matmul(&m.weight)?,
                    Direction::Inverse => x.matmul(&linalg::inverse(&m.weight)?)?,
                };
                let signed = if direction == Direction::Forward { ld } else { -ld };
                logdet.iter_mut().for_each(|l| *l += signed);
                Ok(out)
            }
            Layer::Coupling(c) => {
                let n_pass = c.split - 1;
                let n_trans = self.dim() - n_pass;
                let arity = c.kind.arity();
                let pass = x.columns(0, n_pass);
                let input = Tensor::hcat(&[&pass, y_enc])?;
                let h = c.net.forward(&input)?;
                let mut out = x.clone();
                for r in 0..n {
                    let hr = h.row_slice(r);
                    for j in 0..n_trans {
                        let tr = c.kind.parameterize(&hr[j * arity..(j + 1) * arity]);
                        let col = n_pass + j;
                        // a failed spline root marks the element non-finite
                        let (v, ld) = tr
                            .apply(x.get(r, col), direction)
                            .unwrap_or((T::nan(), T::nan()));
                        out.set(r, col, v);
                        logdet[r] += ld;
                    }
                }
                Ok(out)
            }
        }
    }

    fn run(
        &self,
        input: &Tensor<T>,
        y: &Tensor<T>,
        direction: Direction,
        record: bool,
    ) -> Result<Pass<T>> {
        self.check_batch(input, y)?;
        let y_enc = self.encoder.encode(y)?;
        let mut logdet = vec![T::zero(); input.rows()];
        let mut features = record.then(|| vec![input.clone()]);
        let mut nonfinite_layer = None;
        let mut h = input.clone();
        let order: Box<dyn Iterator<Item = (usize, &Layer<T>)>> = match direction {
            Direction::Forward => Box::new(self.layers.iter().enumerate()),
            Direction::Inverse => Box::new(self.layers.iter().enumerate().rev()),
        };
        for (i, layer) in order {
            h = self.apply_layer(layer, &h, &y_enc, direction, &mut logdet)?;
            if nonfinite_layer.is_none() && !h.all_finite() {
                nonfinite_layer = Some(i);
            }
            if let Some(f) = features.as_mut() {
                f.push(h.clone());
            }
        }
        Ok(Pass {
            output: h,
            logdet,
            nonfinite_layer,
            features,
        })
    }

    /// `z = f(x; y)` row by row, with `log |det df/dx|` per row.
    pub fn forward_batch(&self, x: &Tensor<T>, y: &Tensor<T>, record: bool) -> Result<Pass<T>> {
        self.run(x, y, Direction::Forward, record)
    }

    /// `x = f^{-1}(z; y)` row by row. Layers run in reverse order.
    pub fn inverse_batch(&self, z: &Tensor<T>, y: &Tensor<T>, record: bool) -> Result<Pass<T>> {
        self.run(z, y, Direction::Inverse, record)
    }

    fn single(&self, v: &[T], y: &[T], direction: Direction) -> Result<(Vec<T>, T)> {
        let pass = self.run(
            &Tensor::row(v.to_vec()),
            &Tensor::row(y.to_vec()),
            direction,
            false,
        )?;
        if let Some(layer) = pass.nonfinite_layer {
            return Err(Error::NonFinite {
                layer,
                label: self.layer_labels()[layer].clone(),
            });
        }
        Ok((pass.output.into_data(), pass.logdet[0]))
    }

    /// `(z, log |det df/dx|)` for one sample.
    pub fn flow_forward(&self, x: &[T], y: &[T]) -> Result<(Vec<T>, T)> {
        self.single(x, y, Direction::Forward)
    }

    pub fn flow_inverse(&self, z: &[T], y: &[T]) -> Result<Vec<T>> {
        self.single(z, y, Direction::Inverse).map(|(x, _)| x)
    }

    /// Base log-density of every row of `z`.
    pub fn base_log_prob(&self, z: &Tensor<T>) -> Vec<T> {
        let sigma = self.base_sigma();
        let d = T::lit(self.dim() as f64);
        let half = T::lit(0.5);
        let norm = -d * (sigma.ln() + half * T::TAU().ln());
        (0..z.rows())
            .map(|r| {
                let sq: T = z.row_slice(r).iter().map(|&v| v * v).sum();
                norm - half * sq / (sigma * sigma)
            })
            .collect()
    }

    /// `log q(x | y)` for every row.
    pub fn log_prob_batch(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Vec<T>> {
        let pass = self.forward_batch(x, y, false)?;
        Ok(self
            .base_log_prob(&pass.output)
            .into_iter()
            .zip(&pass.logdet)
            .map(|(b, &l)| b + l)
            .collect())
    }

    pub fn log_prob(&self, x: &[T], y: &[T]) -> Result<T> {
        let (z, logdet) = self.flow_forward(x, y)?;
        let z = Tensor::row(z);
        Ok(self.base_log_prob(&z)[0] + logdet)
    }

    /// Latent draws `tau * eps` with `eps` standard normal, `n x D`.
    pub fn latent(&self, n: usize, tau: T, seed: u64) -> Tensor<T> {
        let mut rng = rng::seeded(seed);
        let mut z = Tensor::zeros(n, self.dim());
        for v in z.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = tau * T::lit(e);
        }
        z
    }

    /// `n` samples from `q(x | y)` at temperature `tau`.
    pub fn sample(&self, y: &[T], n: usize, tau: T, seed: u64) -> Result<Tensor<T>> {
        let ys = repeat_row(y, n);
        self.sample_each(&ys, tau, seed)
    }

    /// One sample per row of `ys`.
    pub fn sample_each(&self, ys: &Tensor<T>, tau: T, seed: u64) -> Result<Tensor<T>> {
        if ys.rows() == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        if tau < T::zero() {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        let z = self.latent(ys.rows(), tau, seed);
        Ok(self.inverse_batch(&z, ys, false)?.output)
    }

    /// Data-dependent actnorm initialization: each actnorm layer is set so
    /// its output over `x` has zero mean and unit (population) variance per
    /// dimension at its position in the stack.
    pub fn actnorm_init(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        self.check_batch(x, y)?;
        if x.rows() < 2 {
            return Err(Error::Config("actnorm init needs at least 2 samples".into()));
        }
        let y_enc = self.encoder.encode(y)?;
        let mut scratch = vec![T::zero(); x.rows()];
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            if let Layer::ActNorm(a) = &mut self.layers[i] {
                let n = T::lit(h.rows() as f64);
                for c in 0..h.cols() {
                    let mean = (0..h.rows()).map(|r| h.get(r, c)).sum::<T>() / n;
                    let var = (0..h.rows())
                        .map(|r| (h.get(r, c) - mean).powi(2))
                        .sum::<T>()
                        / n;
                    let std = var.sqrt().max(T::lit(ACTNORM_STD_FLOOR));
                    a.bias.set(0, c, -mean);
                    a.log_scale.set(0, c, -std.ln());
                }
                a.initialized = true;
            }
            h = self.apply_layer(&self.layers[i], &h, &y_enc, Direction::Forward, &mut scratch)?;
        }
        Ok(())
    }

    /// Records per-row `log q(x | y)` (an `N x 1` column) on `g`, with every
    /// trainable parameter registered under its [`FlowModel::params`] name.
    pub fn log_prob_on_tape(&self, g: &mut Graph<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<NodeId> {
        self.check_batch(x, y)?;
        let n = x.rows();
        let d = self.dim();
        let y_node = g.constant(y.clone());
        let y_enc = self.encoder.forward_on_tape(g, y_node)?;
        let mut h = g.constant(x.clone());
        let mut logdet = g.constant(Tensor::zeros(n, 1));
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::ActNorm(a) => {
                    let ls = g.parameter(format!("layers.{i}.log_scale"), a.log_scale.clone());
                    let b = g.parameter(format!("layers.{i}.bias"), a.bias.clone());
                    let s = g.exp(ls)?;
                    let hb = g.add(h, b)?;
                    h = g.mul(hb, s)?;
                    let ld = g.sum(ls, None)?;
                    logdet = g.add(logdet, ld)?;
                }
                Layer::Mixer(m) => {
                    let w = if m.frozen {
                        g.constant(m.weight.clone())
                    } else {
                        g.parameter(format!("layers.{i}.weight"), m.weight.clone())
                    };
                    h = g.matmul(h, w)?;
                    let ld = mixer_log_abs_det_on_tape(g, w)?;
                    logdet = g.add(logdet, ld)?;
                }
                Layer::Coupling(c) => {
                    let n_pass = c.split - 1;
                    let arity = c.kind.arity();
                    let pass = if n_pass > 0 {
                        Some(g.slice(h, Axis::Cols, 0, n_pass)?)
                    } else {
                        None
                    };
                    let input = conditioner_input(g, pass, y_enc)?;
                    let params = c.net.forward_on_tape(g, input, &format!("layers.{i}.net"))?;
                    let mut cols: Vec<NodeId> = pass.into_iter().collect();
                    for j in 0..d - n_pass {
                        let xj = g.slice(h, Axis::Cols, n_pass + j, 1)?;
                        let hj = g.slice(params, Axis::Cols, j * arity, arity)?;
                        let (yj, ldj) = forward_on_tape(g, &c.kind, xj, hj)?;
                        cols.push(yj);
                        logdet = g.add(logdet, ldj)?;
                    }
                    h = if cols.len() == 1 {
                        cols[0]
                    } else {
                        g.concat(&cols, Axis::Cols)?
                    };
                }
            }
        }
        // log N(z; 0, sigma^2 I) = -|z|^2 / (2 sigma^2) - D log sigma - D/2 log 2 pi
        let sigma = self.base_sigma();
        let half = T::lit(0.5);
        let sq = g.square(h)?;
        let ss = g.sum(sq, Some(Axis::Cols))?;
        let quad = g.scale(ss, -half / (sigma * sigma))?;
        let norm = -T::lit(d as f64) * (sigma.ln() + half * T::TAU().ln());
        let base = g.add_scalar(quad, norm)?;
        g.add(base, logdet)
    }
}

/// `log |det W|` for a 2 x 2 weight on the tape, as `0.5 log(det^2)`.
fn mixer_log_abs_det_on_tape<T: Scalar>(g: &mut Graph<T>, w: NodeId) -> Result<NodeId> {
    if g.shape(w) != [2, 2] {
        return Err(Error::Config(
            "invertible linear log-determinant on tape is implemented for D = 2".into(),
        ));
    }
    let r0 = g.slice(w, Axis::Rows, 0, 1)?;
    let r1 = g.slice(w, Axis::Rows, 1, 1)?;
    let a = g.slice(r0, Axis::Cols, 0, 1)?;
    let b = g.slice(r0, Axis::Cols, 1, 1)?;
    let c = g.slice(r1, Axis::Cols, 0, 1)?;
    let d = g.slice(r1, Axis::Cols, 1, 1)?;
    let ad = g.mul(a, d)?;
    let bc = g.mul(b, c)?;
    let det = g.sub(ad, bc)?;
    let det2 = g.square(det)?;
    let l = g.log(det2)?;
    g.scale(l, T::lit(0.5))
}

/// `row` stacked `n` times.
pub fn repeat_row<T: Scalar>(row: &[T], n: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(row.len() * n);
    for _ in 0..n {
        data.extend_from_slice(row);
    }
    Tensor::new(n, row.len(), data).expect("repeated row has consistent shape")
}

fn random_rotation<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Tensor<T> {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    Tensor::new(2, 2, vec![T::lit(c), T::lit(-s), T::lit(s), T::lit(c)])
        .expect("2x2 rotation")
}
