//! Small dense linear algebra on [`Tensor`]: enough for D x D mixers and
//! feature covariances.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn require_square<T: Scalar>(m: &Tensor<T>, op: &'static str) -> Result<usize> {
    let [r, c] = m.shape();
    if r != c {
        return Err(Error::ShapeMismatch {
            op,
            left: [r, c],
            right: [c, r],
        });
    }
    Ok(r)
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn det<T: Scalar>(m: &Tensor<T>) -> Result<T> {
    let n = require_square(m, "det")?;
    if n == 2 {
        return Ok(m.get(0, 0) * m.get(1, 1) - m.get(0, 1) * m.get(1, 0));
    }
    let mut a = m.clone();
    let mut det = T::one();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a.get(i, col)
                    .abs()
                    .partial_cmp(&a.get(j, col).abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        if a.get(pivot, col) == T::zero() {
            return Ok(T::zero());
        }
        if pivot != col {
            for k in 0..n {
                let tmp = a.get(col, k);
                a.set(col, k, a.get(pivot, k));
                a.set(pivot, k, tmp);
            }
            det = -det;
        }
        let p = a.get(col, col);
        det *= p;
        for r in col + 1..n {
            let f = a.get(r, col) / p;
            for k in col..n {
                let v = a.get(r, k) - f * a.get(col, k);
                a.set(r, k, v);
            }
        }
    }
    Ok(det)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let n = require_square(m, "inverse")?;
    let mut a = m.clone();
    let mut inv = Tensor::identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a.get(i, col)
                    .abs()
                    .partial_cmp(&a.get(j, col).abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        let p = a.get(pivot, col);
        if p == T::zero() || !p.is_finite() {
            return Err(Error::Singular("inverse"));
        }
        if pivot != col {
            for k in 0..n {
                let (x, y) = (a.get(col, k), a.get(pivot, k));
                a.set(col, k, y);
                a.set(pivot, k, x);
                let (x, y) = (inv.get(col, k), inv.get(pivot, k));
                inv.set(col, k, y);
                inv.set(pivot, k, x);
            }
        }
        for k in 0..n {
            a.set(col, k, a.get(col, k) / p);
            inv.set(col, k, inv.get(col, k) / p);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a.get(r, col);
            if f == T::zero() {
                continue;
            }
            for k in 0..n {
                a.set(r, k, a.get(r, k) - f * a.get(col, k));
                inv.set(r, k, inv.get(r, k) - f * inv.get(col, k));
            }
        }
    }
    Ok(inv)
}

/// Lower-triangular `L` with `L L^T = m` for symmetric positive definite `m`.
pub fn cholesky<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let n = require_square(m, "cholesky")?;
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = m.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(acc > T::zero()) {
                    return Err(Error::Singular("cholesky"));
                }
                l.set(i, i, acc.sqrt());
            } else {
                l.set(i, j, acc / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn forward_substitute<T: Scalar>(l: &Tensor<T>, b: &[T]) -> Vec<T> {
    let n = b.len();
    let mut x = vec![T::zero(); n];
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l.get(i, k) * x[k];
        }
        x[i] = acc / l.get(i, i);
    }
    x
}
