//! Eager reverse-mode tape.
//!
//! Every op evaluates its value on construction and records its inputs, so
//! the node list is topologically ordered by construction and `backward`
//! walks it once in reverse. Shapes are validated before any arithmetic.
//!
//! The primitive set is fixed: add, mul, matmul, sum, mean, log, exp,
//! sigmoid, tanh, relu, square, neg, concat, slice. The helpers at the bottom
//! of the impl (`sub`, `recip`, `div`, `scale`, ...) only compose primitives.

use super::{broadcast_shape, reduce_to, zip_broadcast, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Reduction / concatenation axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along axis 0: collapses rows, result has one row.
    Rows,
    /// Along axis 1: collapses columns, result has one column.
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId, Option<Axis>),
    Log(NodeId),
    Exp(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Neg(NodeId),
    Concat(Vec<NodeId>, Axis),
    Slice {
        input: NodeId,
        axis: Axis,
        start: usize,
    },
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<(String, Tensor<T>)>,
    /// Set when any node value or gradient on the tape was non-finite.
    pub nonfinite: bool,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    /// Gradients in parameter registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn into_vec(self) -> Vec<(String, Tensor<T>)> {
        self.grads
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }
}

/// A single-use computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, value: T) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// A named trainable leaf. Names must be unique within a graph.
    pub fn parameter(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|(n, _)| *n != name),
            "duplicate parameter {name}"
        );
        let id = self.push(Op::Param, value);
        self.params.push((name, id));
        id
    }

    fn binary_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<[usize; 2]> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        broadcast_shape(sa, sb).ok_or(Error::ShapeMismatch {
            op,
            left: sa,
            right: sb,
        })
    }

    /// Elementwise sum with 2-D broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("add", a, b)?;
        let v = zip_broadcast(self.value(a), self.value(b), shape, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Elementwise product with 2-D broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("mul", a, b)?;
        let v = zip_broadcast(self.value(a), self.value(b), shape, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<Axis>) -> Result<NodeId> {
        let v = reduce(self.value(a), axis);
        Ok(self.push(Op::Sum(a), v))
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<Axis>) -> Result<NodeId> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "mean",
                left: x.shape(),
                right: [1, 1],
            });
        }
        let count = T::lit(reduced_count(x.shape(), axis) as f64);
        let v = reduce(x, axis).map(|s| s / count);
        Ok(self.push(Op::Mean(a, axis), v))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(T::ln);
        Ok(self.push(Op::Log(a), v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(T::exp);
        Ok(self.push(Op::Exp(a), v))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        Ok(self.push(Op::Sigmoid(a), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(T::tanh);
        Ok(self.push(Op::Tanh(a), v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        Ok(self.push(Op::Relu(a), v))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        Ok(self.push(Op::Square(a), v))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| -x);
        Ok(self.push(Op::Neg(a), v))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        let first = parts.first().ok_or(Error::ShapeMismatch {
            op: "concat",
            left: [0, 0],
            right: [0, 0],
        })?;
        let base = self.shape(*first);
        for &p in parts {
            let s = self.shape(p);
            let ok = match axis {
                Axis::Cols => s[0] == base[0],
                Axis::Rows => s[1] == base[1],
            };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s,
                });
            }
        }
        let v = match axis {
            Axis::Cols => {
                let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
                Tensor::hcat(&refs)?
            }
            Axis::Rows => {
                let rows = parts.iter().map(|&p| self.shape(p)[0]).sum();
                let mut data = Vec::with_capacity(rows * base[1]);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(rows, base[1], data)?
            }
        };
        Ok(self.push(Op::Concat(parts.to_vec(), axis), v))
    }

    /// `len` consecutive rows or columns starting at `start`.
    pub fn slice(&mut self, a: NodeId, axis: Axis, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        let s = x.shape();
        let extent = match axis {
            Axis::Rows => s[0],
            Axis::Cols => s[1],
        };
        if start + len > extent || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: s,
                right: [start, len],
            });
        }
        let v = match axis {
            Axis::Cols => x.columns(start, len),
            Axis::Rows => Tensor::new(
                len,
                s[1],
                x.data()[start * s[1]..(start + len) * s[1]].to_vec(),
            )?,
        };
        Ok(self.push(
            Op::Slice {
                input: a,
                axis,
                start,
            },
            v,
        ))
    }

    // Composites.

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// `1 / a` for strictly positive `a`.
    pub fn recip_pos(&mut self, a: NodeId) -> Result<NodeId> {
        let l = self.log(a)?;
        let nl = self.neg(l)?;
        self.exp(nl)
    }

    /// `a / b` for strictly positive `b`.
    pub fn div_pos(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let r = self.recip_pos(b)?;
        self.mul(a, r)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let k = self.scalar(c);
        self.mul(a, k)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let k = self.scalar(c);
        self.add(a, k)
    }

    /// `mask * a + (1 - mask) * b` with a constant 0/1 mask.
    pub fn select(&mut self, mask: &Tensor<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let inv = mask.map(|m| T::one() - m);
        let m = self.constant(mask.clone());
        let im = self.constant(inv);
        let pa = self.mul(m, a)?;
        let pb = self.mul(im, b)?;
        self.add(pa, pb)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls != [1, 1] {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut nonfinite = false;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.value.all_finite() || !g.all_finite() {
                nonfinite = true;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    let ga = reduce_to(g.clone(), self.shape(*a));
                    let gb = reduce_to(g, self.shape(*b));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let shape = g.shape();
                    let ga = zip_broadcast(&g, self.value(*b), shape, |x, y| x * y);
                    let gb = zip_broadcast(&g, self.value(*a), shape, |x, y| x * y);
                    accumulate(&mut grads, *a, reduce_to(ga, self.shape(*a)));
                    accumulate(&mut grads, *b, reduce_to(gb, self.shape(*b)));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    // dA = G B^T
                    let mut ga = Tensor::zeros(m, k);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        (n as isize, 1),
                        vb.data(),
                        (1, n as isize),
                        T::zero(),
                        ga.data_mut(),
                        (k as isize, 1),
                    );
                    // dB = A^T G
                    let mut gb = Tensor::zeros(k, n);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        T::zero(),
                        gb.data_mut(),
                        (n as isize, 1),
                    );
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sum(a) => {
                    let s = self.shape(*a);
                    let ga = zip_broadcast(&Tensor::zeros(s[0], s[1]), &g, s, |_, y| y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a, axis) => {
                    let s = self.shape(*a);
                    let count = T::lit(reduced_count(s, *axis) as f64);
                    let ga = zip_broadcast(&Tensor::zeros(s[0], s[1]), &g, s, |_, y| y / count);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = elementwise(&g, self.value(*a), |g, x| g / x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = elementwise(&g, &node.value, |g, y| g * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = elementwise(&g, &node.value, |g, y| g * y * (T::one() - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = elementwise(&g, &node.value, |g, y| g * (T::one() - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = elementwise(&g, self.value(*a), |g, x| {
                        if x > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let two = T::lit(2.0);
                    let ga = elementwise(&g, self.value(*a), |g, x| two * x * g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Neg(a) => {
                    accumulate(&mut grads, *a, g.map(|v| -v));
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let s = self.shape(p);
                        let piece = match axis {
                            Axis::Cols => {
                                let piece = g.columns(offset, s[1]);
                                offset += s[1];
                                piece
                            }
                            Axis::Rows => {
                                let cols = s[1];
                                let piece = Tensor::new(
                                    s[0],
                                    cols,
                                    g.data()[offset * cols..(offset + s[0]) * cols].to_vec(),
                                )?;
                                offset += s[0];
                                piece
                            }
                        };
                        accumulate(&mut grads, p, piece);
                    }
                }
                Op::Slice { input, axis, start } => {
                    let s = self.shape(*input);
                    let mut ga = Tensor::zeros(s[0], s[1]);
                    let gs = g.shape();
                    for r in 0..gs[0] {
                        for c in 0..gs[1] {
                            let (ri, ci) = match axis {
                                Axis::Rows => (r + start, c),
                                Axis::Cols => (r, c + start),
                            };
                            ga.set(ri, ci, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *input, ga);
                }
            }
        }

        let grads = self
            .params
            .iter()
            .map(|(name, id)| {
                let s = self.shape(*id);
                let g = grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(s[0], s[1]));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { grads, nonfinite })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn elementwise<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    zip_broadcast(g, x, g.shape(), f)
}

fn reduced_count(shape: [usize; 2], axis: Option<Axis>) -> usize {
    match axis {
        None => shape[0] * shape[1],
        Some(Axis::Rows) => shape[0],
        Some(Axis::Cols) => shape[1],
    }
}

fn reduce<T: Scalar>(x: &Tensor<T>, axis: Option<Axis>) -> Tensor<T> {
    let [rows, cols] = x.shape();
    match axis {
        None => Tensor::scalar(x.sum()),
        Some(Axis::Rows) => {
            let mut out = vec![T::zero(); cols];
            for r in 0..rows {
                for (o, &v) in out.iter_mut().zip(x.row_slice(r)) {
                    *o += v;
                }
            }
            Tensor::row(out)
        }
        Some(Axis::Cols) => {
            Tensor::column((0..rows).map(|r| x.row_slice(r).iter().copied().sum()).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_gradient, max_rel_err};
    use proptest::prelude::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.parameter("p", Tensor::row(vec![1.0, -2.0, 3.5]));
        let l = g.sum(p, None).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(!grads.nonfinite);
    }

    #[test]
    fn half_squared_norm_gives_identity() {
        let mut g = Graph::<f64>::new();
        let p = g.parameter("p", Tensor::row(vec![0.3, -1.2]));
        let sq = g.square(p).unwrap();
        let s = g.sum(sq, None).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[0.3, -1.2]);
    }

    #[test]
    fn log_sigmoid_at_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.parameter("p", Tensor::scalar(0.0));
        let s = g.sigmoid(p).unwrap();
        let l = g.log(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert!((grads.get("p").unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.parameter("p", Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(Error::NonScalarLoss([1, 2]))));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(3, 2));
        let b = g.constant(Tensor::zeros(2, 3));
        let before = g.len();
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.slice(a, Axis::Cols, 1, 2).is_err());
        assert!(g.concat(&[a, b], Axis::Cols).is_err());
        assert_eq!(g.len(), before);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let p = g.parameter("p", Tensor::scalar(3.0));
        let y = g.mul(p, p).unwrap();
        let l = g.add(y, p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("p").unwrap().item(), 7.0);
    }

    #[test]
    fn nonfinite_is_flagged() {
        let mut g = Graph::<f64>::new();
        let p = g.parameter("p", Tensor::scalar(-1.0));
        let l = g.log(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.nonfinite);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.parameter("p", Tensor::scalar(1.0));
        let _q = g.parameter("q", Tensor::row(vec![1.0, 2.0]));
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get("q").unwrap().data(), &[0.0, 0.0]);
    }

    /// One scalar loss exercising every primitive; reused by the gradient
    /// property test below.
    fn all_ops_loss(g: &mut Graph<f64>, a: NodeId, b: NodeId, w: NodeId) -> NodeId {
        let h = g.matmul(a, w).unwrap(); // 3x2
        let hb = g.add(h, b).unwrap(); // broadcast 1x2
        let t = g.tanh(hb).unwrap();
        let s = g.sigmoid(hb).unwrap();
        let r = g.relu(hb).unwrap();
        let e = g.exp(t).unwrap();
        let prod = g.mul(e, s).unwrap();
        let sq = g.square(r).unwrap();
        let cat = g.concat(&[prod, sq], Axis::Cols).unwrap(); // 3x4
        let cat_rows = g.concat(&[cat, cat], Axis::Rows).unwrap(); // 6x4
        let sl = g.slice(cat_rows, Axis::Cols, 1, 2).unwrap();
        let sl2 = g.slice(sl, Axis::Rows, 2, 3).unwrap();
        let lg = g.add_scalar(sl2, 2.0).unwrap();
        let lg = g.log(lg).unwrap();
        let m = g.mean(lg, Some(Axis::Rows)).unwrap();
        let n = g.neg(m).unwrap();
        let sc = g.sum(s, Some(Axis::Cols)).unwrap();
        let sc = g.mean(sc, None).unwrap();
        let tot = g.sum(n, None).unwrap();
        g.add(tot, sc).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn every_primitive_matches_central_differences(
            a in prop::collection::vec(-1.5f64..1.5, 6),
            b in prop::collection::vec(-1.0f64..1.0, 2),
            w in prop::collection::vec(-1.0f64..1.0, 4),
        ) {
            let at = Tensor::new(3, 2, a).unwrap();
            let bt = Tensor::new(1, 2, b).unwrap();
            let wt = Tensor::new(2, 2, w).unwrap();
            // relu kinks make central differences meaningless within h of 0
            let pre = at.matmul(&wt).unwrap().add_row(&bt).unwrap();
            prop_assume!(pre.data().iter().all(|v| v.abs() > 1e-3));

            let mut g = Graph::new();
            let an = g.parameter("a", at.clone());
            let bn = g.parameter("b", bt.clone());
            let wn = g.parameter("w", wt.clone());
            let loss = all_ops_loss(&mut g, an, bn, wn);
            let grads = g.backward(loss).unwrap();

            let eval = |a: &Tensor<f64>, b: &Tensor<f64>, w: &Tensor<f64>| {
                let mut g = Graph::new();
                let an = g.constant(a.clone());
                let bn = g.constant(b.clone());
                let wn = g.constant(w.clone());
                let l = all_ops_loss(&mut g, an, bn, wn);
                g.value(l).item()
            };
            let fa = finite_diff_gradient(|p| eval(p, &bt, &wt), &at, 1e-4);
            let fb = finite_diff_gradient(|p| eval(&at, p, &wt), &bt, 1e-4);
            let fw = finite_diff_gradient(|p| eval(&at, &bt, p), &wt, 1e-4);
            prop_assert!(max_rel_err(grads.get("a").unwrap(), &fa, 1e-3) <= 1e-4);
            prop_assert!(max_rel_err(grads.get("b").unwrap(), &fb, 1e-3) <= 1e-4);
            prop_assert!(max_rel_err(grads.get("w").unwrap(), &fw, 1e-3) <= 1e-4);
        }
    }
}
