//! Monotone rational-quadratic spline with a single learnable interior
//! knot, a learnable bias and identity-plus-shift tails.
//!
//! The spline interpolates the three knots `(B1, B1 + t)`, `(kx, ky)` and
//! `(B2, B2 + t)`. Derivatives at the outer knots are pinned to 1 so `c` and
//! `c'` join the tails `c(x) = x + t` continuously; the interior derivative
//! is learned.

use serde::{Deserialize, Serialize};

use super::Direction;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

/// Fixed bin boundaries and margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplineConfig {
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            b1: -0.5,
            b2: 0.5,
            eps: 0.001,
        }
    }
}

impl SplineConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.b1 < self.b2
            && self.eps > 0.0
            && self.eps < (self.b2 - self.b1) / 2.0
            && self.b1.is_finite()
            && self.b2.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "spline needs B1 < B2 and 0 < eps < (B2 - B1) / 2, got {self:?}"
            )))
        }
    }

    /// Width of the sigmoid range used for the knot coordinates.
    pub(crate) fn span(&self) -> f64 {
        self.b2 - self.b1 - 2.0 * self.eps
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineParams<T> {
    pub t: T,
    pub knot_x: T,
    pub knot_y: T,
    pub knot_slope: T,
    pub b1: T,
    pub b2: T,
    pub eps: T,
}

/// `h_raw = (t, r_x, r_y, r_slope)`.
pub fn parameterize_rq_spline<T: Scalar>(h_raw: [T; 4], cfg: SplineConfig) -> SplineParams<T> {
    let (b1, b2, eps) = (T::lit(cfg.b1), T::lit(cfg.b2), T::lit(cfg.eps));
    let span = T::lit(cfg.span());
    let t = h_raw[0];
    SplineParams {
        t,
        knot_x: b1 + eps + span * sigmoid(h_raw[1]),
        knot_y: b1 + t + eps + span * sigmoid(h_raw[2]),
        knot_slope: eps + h_raw[3].exp(),
        b1,
        b2,
        eps,
    }
}

/// One rational-quadratic segment.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Bin<T> {
    pub xa: T,
    pub xb: T,
    pub ya: T,
    pub yb: T,
    pub da: T,
    pub db: T,
}

impl<T: Scalar> Bin<T> {
    fn width(&self) -> T {
        self.xb - self.xa
    }

    fn height(&self) -> T {
        self.yb - self.ya
    }

    fn slope(&self) -> T {
        self.height() / self.width()
    }

    /// Value and log-derivative at local coordinate `xi` in `[0, 1]`.
    pub(crate) fn eval(&self, xi: T) -> (T, T) {
        let one = T::one();
        let two = T::lit(2.0);
        let s = self.slope();
        let q = xi * (one - xi);
        let den = s + (self.da + self.db - two * s) * q;
        let num = s * xi * xi + self.da * q;
        let y = self.ya + self.height() * num / den;
        let dnum = self.db * xi * xi + two * s * q + self.da * (one - xi) * (one - xi);
        let log_deriv = two * s.ln() + dnum.ln() - two * den.ln();
        (y, log_deriv)
    }

    /// Local coordinate of output `y`, from the segment's quadratic.
    fn solve(&self, y: T) -> Result<T> {
        let two = T::lit(2.0);
        let four = T::lit(4.0);
        let s = self.slope();
        let h = self.height();
        let delta = self.da + self.db - two * s;
        let z = y - self.ya;
        let a = h * (s - self.da) + z * delta;
        let b = h * self.da - z * delta;
        let c = -s * z;
        let disc = (b * b - four * a * c).max(T::zero());
        let xi = (two * c) / (-b - disc.sqrt());
        let tol = T::lit(1e-9);
        if !(xi >= -tol && xi <= T::one() + tol) {
            return Err(Error::SplineRoot { xi: xi.as_f64() });
        }
        Ok(xi.max(T::zero()).min(T::one()))
    }
}

impl<T: Scalar> SplineParams<T> {
    pub(crate) fn left_bin(&self) -> Bin<T> {
        Bin {
            xa: self.b1,
            xb: self.knot_x,
            ya: self.b1 + self.t,
            yb: self.knot_y,
            da: T::one(),
            db: self.knot_slope,
        }
    }

    pub(crate) fn right_bin(&self) -> Bin<T> {
        Bin {
            xa: self.knot_x,
            xb: self.b2,
            ya: self.knot_y,
            yb: self.b2 + self.t,
            da: self.knot_slope,
            db: T::one(),
        }
    }

    /// Checks the ordering constraints the parameterization guarantees.
    pub fn is_valid(&self) -> bool {
        let (lo, hi) = (self.b1 + self.eps, self.b2 - self.eps);
        self.knot_x > lo
            && self.knot_x < hi
            && self.knot_y > lo + self.t
            && self.knot_y < hi + self.t
            && self.knot_slope > self.eps
    }
}

pub fn rq_spline_transform<T: Scalar>(
    x: T,
    p: &SplineParams<T>,
    direction: Direction,
) -> Result<(T, T)> {
    match direction {
        Direction::Forward => {
            if x <= p.b1 || x >= p.b2 || x.is_nan() {
                return Ok((x + p.t, T::zero()));
            }
            let bin = if x < p.knot_x {
                p.left_bin()
            } else {
                p.right_bin()
            };
            let xi = (x - bin.xa) / bin.width();
            Ok(bin.eval(xi))
        }
        Direction::Inverse => {
            if x <= p.b1 + p.t || x >= p.b2 + p.t || x.is_nan() {
                return Ok((x - p.t, T::zero()));
            }
            let bin = if x < p.knot_y {
                p.left_bin()
            } else {
                p.right_bin()
            };
            let xi = bin.solve(x)?;
            let (_, log_deriv) = bin.eval(xi);
            Ok((bin.xa + xi * bin.width(), -log_deriv))
        }
    }
}
