use serde::{Deserialize, Serialize};

use super::Direction;
use crate::scalar::{log_sigmoid, sigmoid, Scalar};

/// Raw log-scale clamp for [`ScaleVariant::Unbounded`]. Wide enough that a
/// diverging scale is still visible, narrow enough to stay finite.
pub const UNBOUNDED_LOG_SCALE_CLAMP: f64 = 15.0;

/// Lower offset of [`ScaleVariant::ShiftedBounded`].
pub const SHIFTED_SCALE_FLOOR: f64 = 0.1;

/// How the raw scale output `r` is squashed into a positive scale `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleVariant {
    /// `s = exp(clamp(r, -15, 15))`
    Unbounded,
    /// `s = sigmoid(r)`, so `s` in `(0, 1)`
    UnitBounded,
    /// `s = 0.1 + sigmoid(r)`, so `s` in `(0.1, 1.1)`
    ShiftedBounded,
}

impl ScaleVariant {
    pub fn scale<T: Scalar>(self, r: T) -> T {
        match self {
            ScaleVariant::Unbounded => clamp_log_scale(r).exp(),
            ScaleVariant::UnitBounded => sigmoid(r),
            ScaleVariant::ShiftedBounded => T::lit(SHIFTED_SCALE_FLOOR) + sigmoid(r),
        }
    }

    /// `log s`, computed without forming `s` where that loses precision.
    pub fn log_scale<T: Scalar>(self, r: T) -> T {
        match self {
            ScaleVariant::Unbounded => clamp_log_scale(r),
            ScaleVariant::UnitBounded => log_sigmoid(r),
            ScaleVariant::ShiftedBounded => self.scale(r).ln(),
        }
    }

    /// Open interval the scale lives in.
    pub fn interval(self) -> (f64, f64) {
        let c = UNBOUNDED_LOG_SCALE_CLAMP;
        match self {
            ScaleVariant::Unbounded => ((-c).exp(), c.exp()),
            ScaleVariant::UnitBounded => (0.0, 1.0),
            ScaleVariant::ShiftedBounded => (SHIFTED_SCALE_FLOOR, 1.0 + SHIFTED_SCALE_FLOOR),
        }
    }
}

fn clamp_log_scale<T: Scalar>(r: T) -> T {
    let c = T::lit(UNBOUNDED_LOG_SCALE_CLAMP);
    r.max(-c).min(c)
}

/// `c(x) = s x + t` with `s > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams<T> {
    pub s: T,
    pub t: T,
}

/// `h_raw = (r, t)`: `r` is squashed by `variant`, `t` passes through.
pub fn parameterize_affine<T: Scalar>(h_raw: [T; 2], variant: ScaleVariant) -> AffineParams<T> {
    AffineParams {
        s: variant.scale(h_raw[0]),
        t: h_raw[1],
    }
}

pub fn affine_transform<T: Scalar>(x: T, p: &AffineParams<T>, direction: Direction) -> (T, T) {
    match direction {
        Direction::Forward => (p.s * x + p.t, p.s.ln()),
        Direction::Inverse => ((x - p.t) / p.s, -p.s.ln()),
    }
}
