//! Conditional normalizing flows on a small 2D inverse problem.
//!
//! The core is generic over [`Scalar`] (`f32` or `f64`); the `*64` aliases
//! at the bottom are what the experiments use.

pub mod conditioner;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod toy;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowModel, Layer, LayerOrder, MixerInit};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor};
pub use transforms::{Direction, ScaleVariant, SplineConfig, TransformKind};

pub type Tensor64 = Tensor<f64>;
pub type FlowModel64 = FlowModel<f64>;
