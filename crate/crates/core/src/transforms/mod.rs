//! Elementwise diffeomorphisms `c(x; h)` of the real line used inside
//! coupling layers.
//!
//! Each transform has a scalar path (forward, inverse and log-derivative,
//! used for sampling and diagnostics) and a tape path in [`graph`] used for
//! maximum-likelihood training in the density direction.

mod additive;
mod affine;
pub mod graph;
mod spline;

pub use additive::additive_transform;
pub use affine::{affine_transform, parameterize_affine, AffineParams, ScaleVariant};
pub use spline::{parameterize_rq_spline, rq_spline_transform, SplineConfig, SplineParams};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Inverse,
}

/// Which coupling transform a layer uses, with its fixed hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    Affine { variant: ScaleVariant },
    Additive,
    Spline(SplineConfig),
}

impl TransformKind {
    /// Raw conditioner outputs consumed per transformed coordinate.
    pub fn arity(&self) -> usize {
        match self {
            TransformKind::Affine { .. } => 2,
            TransformKind::Additive => 1,
            TransformKind::Spline(_) => 4,
        }
    }

    /// Short layer label used in variance traces.
    pub fn label(&self) -> &'static str {
        match self {
            TransformKind::Affine { .. } => "Aff",
            TransformKind::Additive => "Add",
            TransformKind::Spline(_) => "RQs",
        }
    }

    /// Maps raw conditioner output to concrete transform parameters.
    pub fn parameterize<T: Scalar>(&self, h_raw: &[T]) -> Transform<T> {
        debug_assert_eq!(h_raw.len(), self.arity());
        match *self {
            TransformKind::Affine { variant } => {
                Transform::Affine(parameterize_affine([h_raw[0], h_raw[1]], variant))
            }
            TransformKind::Additive => Transform::Additive { t: h_raw[0] },
            TransformKind::Spline(cfg) => Transform::Spline(parameterize_rq_spline(
                [h_raw[0], h_raw[1], h_raw[2], h_raw[3]],
                cfg,
            )),
        }
    }
}

/// A fully parameterized elementwise transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform<T> {
    Affine(AffineParams<T>),
    Additive { t: T },
    Spline(SplineParams<T>),
}

impl<T: Scalar> Transform<T> {
    /// Returns `(c(x), log c'(x))` forward or `(c^{-1}(x), -log c'(c^{-1}(x)))`
    /// inverse.
    pub fn apply(&self, x: T, direction: Direction) -> Result<(T, T)> {
        match self {
            Transform::Affine(p) => Ok(affine_transform(x, p, direction)),
            Transform::Additive { t } => Ok(additive_transform(x, *t, direction)),
            Transform::Spline(p) => rq_spline_transform(x, p, direction),
        }
    }

    /// Forward derivative `c'(x)`.
    pub fn derivative(&self, x: T) -> Result<T> {
        self.apply(x, Direction::Forward).map(|(_, ld)| ld.exp())
    }
}

/// `c'` evaluated at `-probe_radius` and `+probe_radius`.
///
/// A transform whose two values agree keeps feature variance bounded under
/// inversion far from the data; the affine family returns `(s, s)`.
pub fn tail_derivative_bounds<T: Scalar>(transform: &Transform<T>, probe_radius: T) -> (T, T) {
    let at = |x: T| transform.derivative(x).unwrap_or(T::nan());
    (at(-probe_radius), at(probe_radius))
}
