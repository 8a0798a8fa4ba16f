//! Density-direction transforms recorded on a [`Graph`] for training.
//!
//! Piecewise structure (spline bins, tails, the unbounded-scale clamp) is
//! expressed with constant 0/1 masks computed from the current values, so
//! every branch stays finite and the unused branches receive zero gradient.

use super::affine::{UNBOUNDED_LOG_SCALE_CLAMP, SHIFTED_SCALE_FLOOR};
use super::{ScaleVariant, SplineConfig, TransformKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Axis, Graph, NodeId, Tensor};

/// Applies `c(x; h)` to an `N x 1` column `x` with raw parameters `h`
/// (`N x arity`). Returns the transformed column and per-row `log c'(x)`.
pub fn forward_on_tape<T: Scalar>(
    g: &mut Graph<T>,
    kind: &TransformKind,
    x: NodeId,
    h: NodeId,
) -> Result<(NodeId, NodeId)> {
    let [n, cols] = g.shape(x);
    if cols != 1 || g.shape(h) != [n, kind.arity()] {
        return Err(Error::ShapeMismatch {
            op: "coupling transform",
            left: g.shape(x),
            right: g.shape(h),
        });
    }
    match *kind {
        TransformKind::Affine { variant } => affine(g, variant, x, h),
        TransformKind::Additive => {
            let y = g.add(x, h)?;
            let zero = g.constant(Tensor::zeros(n, 1));
            Ok((y, zero))
        }
        TransformKind::Spline(cfg) => spline(g, &cfg, x, h),
    }
}

/// Scale `s` and `log s` from raw `r` for an affine variant.
pub fn scale_on_tape<T: Scalar>(
    g: &mut Graph<T>,
    variant: ScaleVariant,
    r: NodeId,
) -> Result<(NodeId, NodeId)> {
    Ok(match variant {
        ScaleVariant::Unbounded => {
            let c = T::lit(UNBOUNDED_LOG_SCALE_CLAMP);
            let rv = g.value(r);
            let inside = rv.map(|v| if v.abs() <= c { T::one() } else { T::zero() });
            let clamped = g.constant(rv.map(|v| v.max(-c).min(c)));
            let rc = g.select(&inside, r, clamped)?;
            (g.exp(rc)?, rc)
        }
        ScaleVariant::UnitBounded => {
            let s = g.sigmoid(r)?;
            (s, g.log(s)?)
        }
        ScaleVariant::ShiftedBounded => {
            let sig = g.sigmoid(r)?;
            let s = g.add_scalar(sig, T::lit(SHIFTED_SCALE_FLOOR))?;
            (s, g.log(s)?)
        }
    })
}

fn affine<T: Scalar>(
    g: &mut Graph<T>,
    variant: ScaleVariant,
    x: NodeId,
    h: NodeId,
) -> Result<(NodeId, NodeId)> {
    let r = g.slice(h, Axis::Cols, 0, 1)?;
    let t = g.slice(h, Axis::Cols, 1, 1)?;
    let (s, log_s) = scale_on_tape(g, variant, r)?;
    let sx = g.mul(s, x)?;
    let y = g.add(sx, t)?;
    Ok((y, log_s))
}

struct TapeBin {
    xa: NodeId,
    xb: NodeId,
    ya: NodeId,
    yb: NodeId,
    da: NodeId,
    db: NodeId,
}

fn spline<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &SplineConfig,
    x: NodeId,
    h: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (b1, b2, eps, span) = (
        T::lit(cfg.b1),
        T::lit(cfg.b2),
        T::lit(cfg.eps),
        T::lit(cfg.span()),
    );
    let t = g.slice(h, Axis::Cols, 0, 1)?;
    let rx = g.slice(h, Axis::Cols, 1, 1)?;
    let ry = g.slice(h, Axis::Cols, 2, 1)?;
    let rd = g.slice(h, Axis::Cols, 3, 1)?;

    let sx = g.sigmoid(rx)?;
    let sx = g.scale(sx, span)?;
    let kx = g.add_scalar(sx, b1 + eps)?;
    let sy = g.sigmoid(ry)?;
    let sy = g.scale(sy, span)?;
    let sy = g.add_scalar(sy, b1 + eps)?;
    let ky = g.add(sy, t)?;
    let ed = g.exp(rd)?;
    let kd = g.add_scalar(ed, eps)?;

    let xv = g.value(x).clone();
    let kxv = g.value(kx).clone();
    let n = xv.rows();
    let mut left = Tensor::zeros(n, 1);
    let mut right = Tensor::zeros(n, 1);
    let mut tail = Tensor::zeros(n, 1);
    for i in 0..n {
        let (xi, k) = (xv.get(i, 0), kxv.get(i, 0));
        if xi <= b1 || xi >= b2 || xi.is_nan() {
            tail.set(i, 0, T::one());
        } else if xi < k {
            left.set(i, 0, T::one());
        } else {
            right.set(i, 0, T::one());
        }
    }

    let one = g.scalar(T::one());
    let b1n = g.scalar(b1);
    let b2n = g.scalar(b2);
    let ya_left = g.add_scalar(t, b1)?;
    let yb_right = g.add_scalar(t, b2)?;

    let lb = TapeBin {
        xa: b1n,
        xb: kx,
        ya: ya_left,
        yb: ky,
        da: one,
        db: kd,
    };
    let rb = TapeBin {
        xa: kx,
        xb: b2n,
        ya: ky,
        yb: yb_right,
        da: kd,
        db: one,
    };
    let (yl, ldl) = bin_on_tape(g, &left, x, &lb)?;
    let (yr, ldr) = bin_on_tape(g, &right, x, &rb)?;
    let yt = g.add(x, t)?;

    let ml = g.constant(left);
    let mr = g.constant(right);
    let mt = g.constant(tail);
    let a = g.mul(ml, yl)?;
    let b = g.mul(mr, yr)?;
    let c = g.mul(mt, yt)?;
    let ab = g.add(a, b)?;
    let y = g.add(ab, c)?;
    let la = g.mul(ml, ldl)?;
    let lb = g.mul(mr, ldr)?;
    let logd = g.add(la, lb)?;
    Ok((y, logd))
}

/// One segment evaluated for every row; rows outside `mask` are evaluated
/// at the segment midpoint so their (discarded) values stay finite.
fn bin_on_tape<T: Scalar>(
    g: &mut Graph<T>,
    mask: &Tensor<T>,
    x: NodeId,
    bin: &TapeBin,
) -> Result<(NodeId, NodeId)> {
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let w = g.sub(bin.xb, bin.xa)?;
    let hgt = g.sub(bin.yb, bin.ya)?;
    let inv_w = g.recip_pos(w)?;
    let mid = g.add(bin.xa, bin.xb)?;
    let mid = g.scale(mid, half)?;
    let xs = g.select(mask, x, mid)?;
    let off = g.sub(xs, bin.xa)?;
    let xi = g.mul(off, inv_w)?;
    let s = g.mul(hgt, inv_w)?;

    let nxi = g.neg(xi)?;
    let omx = g.add_scalar(nxi, T::one())?;
    let q = g.mul(xi, omx)?;
    let xi2 = g.square(xi)?;
    let omx2 = g.square(omx)?;

    let dd = g.add(bin.da, bin.db)?;
    let s2 = g.scale(s, two)?;
    let delta = g.sub(dd, s2)?;
    let dq = g.mul(delta, q)?;
    let den = g.add(s, dq)?;

    let sxi2 = g.mul(s, xi2)?;
    let daq = g.mul(bin.da, q)?;
    let num = g.add(sxi2, daq)?;
    let ratio = g.div_pos(num, den)?;
    let rise = g.mul(hgt, ratio)?;
    let y = g.add(bin.ya, rise)?;

    let t1 = g.mul(bin.db, xi2)?;
    let sq = g.mul(s, q)?;
    let t2 = g.scale(sq, two)?;
    let t3 = g.mul(bin.da, omx2)?;
    let t12 = g.add(t1, t2)?;
    let dnum = g.add(t12, t3)?;

    let log_s = g.log(s)?;
    let log_dnum = g.log(dnum)?;
    let log_den = g.log(den)?;
    let a = g.scale(log_s, two)?;
    let b = g.scale(log_den, two)?;
    let ab = g.sub(a, b)?;
    let logd = g.add(ab, log_dnum)?;
    Ok((y, logd))
}
