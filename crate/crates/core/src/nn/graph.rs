//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Ops
//! record a backward closure that maps the upstream gradient to per-parent
//! contributions; [`Graph::backward`] walks the tape in reverse creation
//! order, which is a valid topological order because ops can only consume
//! tensors that already exist.
//!
//! Training code builds a fresh graph per step (parameters enter via
//! [`Graph::leaf`]), so there is no retained-graph machinery and no
//! aliasing: every op's captured state is an owned copy.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn, Slice};

use super::conv::{conv2d_backward, conv2d_forward, out_dims, Pad};
use super::Real;

/// Handle to a node in a [`Graph`]. Only valid for the graph that made it.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&ArrayD<T>, &mut dyn FnMut(usize, ArrayD<T>))>;

struct Node<T: Real> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    requires_grad: bool,
    op: &'static str,
    backward: Option<BackFn<T>>,
}

/// Flat autodiff tape. See module docs.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(
        &mut self,
        value: ArrayD<T>,
        op: &'static str,
        requires_grad: bool,
        backward: Option<BackFn<T>>,
    ) -> Tensor {
        debug_assert!(
            value.iter().all(|v| v.is_finite()) || op == "leaf" || op == "const",
            "op {op} produced non-finite values"
        );
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            backward,
        });
        Tensor(self.nodes.len() - 1)
    }

    /// Tensor that does not participate in differentiation.
    pub fn constant(&mut self, value: ArrayD<T>) -> Tensor {
        self.push(value, "const", false, None)
    }

    /// Differentiable input (parameter or probed variable).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Tensor {
        self.push(value, "leaf", true, None)
    }

    /// 0-d constant.
    pub fn scalar(&mut self, v: T) -> Tensor {
        self.constant(ndarray::arr0(v).into_dyn())
    }

    pub fn value(&self, t: Tensor) -> &ArrayD<T> {
        &self.nodes[t.0].value
    }

    /// Extract a 0-d / single-element tensor's value.
    pub fn scalar_value(&self, t: Tensor) -> T {
        debug_assert_eq!(self.nodes[t.0].value.len(), 1);
        *self.nodes[t.0].value.iter().next().unwrap()
    }

    /// Gradient as of the last [`Graph::backward`] call. `None` for nodes
    /// the loss did not reach or that do not require gradients.
    pub fn grad(&self, t: Tensor) -> Option<&ArrayD<T>> {
        self.nodes[t.0].grad.as_ref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Sorted, deduplicated names of every op recorded on the tape. Used by
    /// structural tests that must prove a loss contains only first-order
    /// machinery (e.g. no gradient-penalty style double backward).
    pub fn ops_present(&self) -> Vec<&'static str> {
        let set: BTreeSet<&'static str> = self.nodes.iter().map(|n| n.op).collect();
        set.into_iter().collect()
    }

    fn req(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Reverse pass from a scalar root. Gradients of earlier backward calls
    /// on the same graph are overwritten, not accumulated.
    pub fn backward(&mut self, root: Tensor) {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        assert!(
            self.nodes[root.0].requires_grad,
            "backward root does not depend on any differentiable leaf"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = self.nodes[i].backward.as_ref() {
                let mut contribs: Vec<(usize, ArrayD<T>)> = Vec::new();
                back(&g, &mut |pid, c| contribs.push((pid, c)));
                for (pid, c) in contribs {
                    if !self.nodes[pid].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        c.shape(),
                        self.nodes[pid].value.shape(),
                        "gradient shape mismatch flowing into op {}",
                        self.nodes[pid].op
                    );
                    match &mut grads[pid] {
                        Some(acc) => acc.zip_mut_with(&c, |a, b| *a = *a + *b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            if self.nodes[i].requires_grad {
                self.nodes[i].grad = Some(g);
            }
        }
    }

    // ---- elementwise binary -------------------------------------------------

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let req = self.req(a) || self.req(b);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            }) as BackFn<T>
        });
        self.push(value, "add", req, back)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let req = self.req(a) || self.req(b);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                sink(a.0, g.clone());
                sink(b.0, g.mapv(|v| -v));
            }) as BackFn<T>
        });
        self.push(value, "sub", req, back)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let req = self.req(a) || self.req(b);
        let back: Option<BackFn<T>> = req.then(|| {
            let va = self.nodes[a.0].value.clone();
            let vb = self.nodes[b.0].value.clone();
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                sink(a.0, g * &vb);
                sink(b.0, g * &va);
            }) as BackFn<T>
        });
        self.push(value, "mul", req, back)
    }

    // ---- elementwise unary --------------------------------------------------

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| -v);
        let req = self.req(a);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                sink(a.0, g.mapv(|v| -v));
            }) as BackFn<T>
        });
        self.push(value, "neg", req, back)
    }

    pub fn scale(&mut self, a: Tensor, c: T) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let req = self.req(a);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                sink(a.0, g.mapv(|v| v * c));
            }) as BackFn<T>
        });
        self.push(value, "scale", req, back)
    }

    pub fn add_scalar(&mut self, a: Tensor, c: T) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| v + c);
        let req = self.req(a);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                sink(a.0, g.clone());
            }) as BackFn<T>
        });
        self.push(value, "add_scalar", req, back)
    }

    pub fn abs(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| v.abs());
        let req = self.req(a);
        let back: Option<BackFn<T>> = req.then(|| {
            let va = self.nodes[a.0].value.clone();
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let mut out = g.clone();
                out.zip_mut_with(&va, |gv, xv| {
                    *gv = if *xv > T::zero() {
                        *gv
                    } else if *xv < T::zero() {
                        -*gv
                    } else {
                        T::zero()
                    }
                });
                sink(a.0, out);
            }) as BackFn<T>
        });
        self.push(value, "abs", req, back)
    }

    pub fn leaky_relu(&mut self, a: Tensor, alpha: T) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| if v > T::zero() { v } else { v * alpha });
        let req = self.req(a);
        let back: Option<BackFn<T>> = req.then(|| {
            let va = self.nodes[a.0].value.clone();
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let mut out = g.clone();
                out.zip_mut_with(&va, |gv, xv| {
                    if *xv <= T::zero() {
                        *gv = *gv * alpha;
                    }
                });
                sink(a.0, out);
            }) as BackFn<T>
        });
        self.push(value, "leaky_relu", req, back)
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| v.tanh());
        let req = self.req(a);
        let back: Option<BackFn<T>> = req.then(|| {
            let y = value.clone();
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let mut out = g.clone();
                out.zip_mut_with(&y, |gv, yv| *gv = *gv * (T::one() - *yv * *yv));
                sink(a.0, out);
            }) as BackFn<T>
        });
        self.push(value, "tanh", req, back)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let one = T::one();
        let value = self.nodes[a.0].value.mapv(|v| one / (one + (-v).exp()));
        let req = self.req(a);
        let back: Option<BackFn<T>> = req.then(|| {
            let y = value.clone();
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let mut out = g.clone();
                out.zip_mut_with(&y, |gv, yv| *gv = *gv * *yv * (T::one() - *yv));
                sink(a.0, out);
            }) as BackFn<T>
        });
        self.push(value, "sigmoid", req, back)
    }

    /// Numerically stable `ln(1 + e^x)`; its derivative is the sigmoid.
    pub fn softplus(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| {
            let z = if v > T::zero() { v } else { T::zero() };
            z + ((-v.abs()).exp() + T::one()).ln()
        });
        let req = self.req(a);
        let back: Option<BackFn<T>> = req.then(|| {
            let va = self.nodes[a.0].value.clone();
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let mut out = g.clone();
                out.zip_mut_with(&va, |gv, xv| {
                    let one = T::one();
                    let s = if *xv >= T::zero() {
                        one / (one + (-*xv).exp())
                    } else {
                        let e = (*xv).exp();
                        e / (one + e)
                    };
                    *gv = *gv * s;
                });
                sink(a.0, out);
            }) as BackFn<T>
        });
        self.push(value, "softplus", req, back)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let value = ndarray::arr0(self.nodes[a.0].value.sum()).into_dyn();
        let req = self.req(a);
        let shape = self.nodes[a.0].value.raw_dim();
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let gv = *g.iter().next().unwrap();
                sink(a.0, ArrayD::from_elem(shape.clone(), gv));
            }) as BackFn<T>
        });
        self.push(value, "sum", req, back)
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = T::from_usize(self.nodes[a.0].value.len()).unwrap();
        let value = ndarray::arr0(self.nodes[a.0].value.sum() / n).into_dyn();
        let req = self.req(a);
        let shape = self.nodes[a.0].value.raw_dim();
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let gv = *g.iter().next().unwrap() / n;
                sink(a.0, ArrayD::from_elem(shape.clone(), gv));
            }) as BackFn<T>
        });
        self.push(value, "mean", req, back)
    }

    /// `[n, ...] -> [n]`: mean over every axis but the first.
    pub fn mean_per_sample(&mut self, a: Tensor) -> Tensor {
        let va = &self.nodes[a.0].value;
        let n = va.shape()[0];
        let per = va.len() / n;
        let pt = T::from_usize(per).unwrap();
        let mut out = Array1::<T>::zeros(n);
        let flat: Vec<T> = va.iter().copied().collect();
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..per {
                acc = acc + flat[i * per + j];
            }
            out[i] = acc / pt;
        }
        let req = self.req(a);
        let shape = va.raw_dim();
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let gs: Vec<T> = g.iter().copied().collect();
                let mut gx = Vec::with_capacity(n * per);
                for gi in gs.iter().take(n) {
                    for _ in 0..per {
                        gx.push(*gi / pt);
                    }
                }
                sink(a.0, ArrayD::from_shape_vec(shape.clone(), gx).unwrap());
            }) as BackFn<T>
        });
        self.push(out.into_dyn(), "mean_per_sample", req, back)
    }

    // ---- shape --------------------------------------------------------------

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.len(), shape.iter().product::<usize>(), "reshape element count");
        let value =
            ArrayD::from_shape_vec(IxDyn(shape), va.iter().copied().collect()).expect("reshape");
        let req = self.req(a);
        let orig = va.raw_dim();
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let gr = ArrayD::from_shape_vec(orig.clone(), g.iter().copied().collect()).unwrap();
                sink(a.0, gr);
            }) as BackFn<T>
        });
        self.push(value, "reshape", req, back)
    }

    /// Concatenate along axis 1 (channel axis of `[n, c, h, w]` tensors).
    pub fn concat_c(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).expect("concat");
        let req = self.req(a) || self.req(b);
        let ca = va.shape()[1];
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let ga = g.slice_axis(Axis(1), Slice::from(0..ca)).to_owned();
                let gb = g.slice_axis(Axis(1), Slice::from(ca..)).to_owned();
                sink(a.0, ga);
                sink(b.0, gb);
            }) as BackFn<T>
        });
        self.push(value, "concat_c", req, back)
    }

    pub fn transpose2(&mut self, a: Tensor) -> Tensor {
        let va = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("2-d");
        let value = va.t().as_standard_layout().to_owned().into_dyn();
        let req = self.req(a);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                sink(a.0, g2.t().as_standard_layout().to_owned().into_dyn());
            }) as BackFn<T>
        });
        self.push(value, "transpose", req, back)
    }

    // ---- linear algebra -----------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let va = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("lhs 2-d");
        let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().expect("rhs 2-d");
        let value = va.dot(&vb).into_dyn();
        let req = self.req(a) || self.req(b);
        let back: Option<BackFn<T>> = req.then(|| {
            let va = va.to_owned();
            let vb = vb.to_owned();
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                sink(a.0, g2.dot(&vb.t()).into_dyn());
                sink(b.0, va.t().dot(&g2).into_dyn());
            }) as BackFn<T>
        });
        self.push(value, "matmul", req, back)
    }

    // ---- row-wise normalizations ---------------------------------------------

    /// Row-wise softmax of a `[n, k]` matrix.
    pub fn softmax_rows(&mut self, a: Tensor) -> Tensor {
        let va = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("2-d");
        let (n, k) = va.dim();
        let mut value = Array2::<T>::zeros((n, k));
        for i in 0..n {
            let row = va.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for j in 0..k {
                let e = (row[j] - mx).exp();
                value[[i, j]] = e;
                denom = denom + e;
            }
            for j in 0..k {
                value[[i, j]] = value[[i, j]] / denom;
            }
        }
        let req = self.req(a);
        let back: Option<BackFn<T>> = req.then(|| {
            let y = value.clone();
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array2::<T>::zeros((n, k));
                for i in 0..n {
                    let mut dot = T::zero();
                    for j in 0..k {
                        dot = dot + g2[[i, j]] * y[[i, j]];
                    }
                    for j in 0..k {
                        gx[[i, j]] = y[[i, j]] * (g2[[i, j]] - dot);
                    }
                }
                sink(a.0, gx.into_dyn());
            }) as BackFn<T>
        });
        self.push(value.into_dyn(), "softmax_rows", req, back)
    }

    /// L2-normalize each row of a `[n, k]` matrix. Rows with norm <= `eps`
    /// map to the zero vector (and receive zero gradient), which makes the
    /// downstream cosine similarity of a degenerate embedding exactly 0.
    pub fn rows_unit_norm(&mut self, a: Tensor, eps: T) -> Tensor {
        let va = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("2-d");
        let (n, k) = va.dim();
        let mut value = Array2::<T>::zeros((n, k));
        let mut norms = Array1::<T>::zeros(n);
        for i in 0..n {
            let mut s = T::zero();
            for j in 0..k {
                s = s + va[[i, j]] * va[[i, j]];
            }
            let r = s.sqrt();
            norms[i] = r;
            if r > eps {
                for j in 0..k {
                    value[[i, j]] = va[[i, j]] / r;
                }
            }
        }
        let req = self.req(a);
        let back: Option<BackFn<T>> = req.then(|| {
            let y = value.clone();
            let norms = norms.clone();
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array2::<T>::zeros((n, k));
                for i in 0..n {
                    let r = norms[i];
                    if r <= eps {
                        continue;
                    }
                    let mut dot = T::zero();
                    for j in 0..k {
                        dot = dot + g2[[i, j]] * y[[i, j]];
                    }
                    for j in 0..k {
                        gx[[i, j]] = (g2[[i, j]] - y[[i, j]] * dot) / r;
                    }
                }
                sink(a.0, gx.into_dyn());
            }) as BackFn<T>
        });
        self.push(value.into_dyn(), "rows_unit_norm", req, back)
    }

    /// Per-sample, per-channel normalization with affine parameters:
    /// instance norm over the spatial axes of `[n, c, h, w]`.
    pub fn instance_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: T) -> Tensor {
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("4-d");
        let vg = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().expect("gamma 1-d");
        let vb = self.nodes[beta.0].value.view().into_dimensionality::<Ix1>().expect("beta 1-d");
        let (n, c, h, w) = vx.dim();
        assert_eq!(vg.len(), c);
        assert_eq!(vb.len(), c);
        let m = T::from_usize(h * w).unwrap();
        let mut xhat = ndarray::Array4::<T>::zeros((n, c, h, w));
        let mut inv_s = Array2::<T>::zeros((n, c));
        let mut value = ndarray::Array4::<T>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let mut mu = T::zero();
                for y in 0..h {
                    for xx in 0..w {
                        mu = mu + vx[[ni, ci, y, xx]];
                    }
                }
                mu = mu / m;
                let mut var = T::zero();
                for y in 0..h {
                    for xx in 0..w {
                        let d = vx[[ni, ci, y, xx]] - mu;
                        var = var + d * d;
                    }
                }
                var = var / m;
                let is = T::one() / (var + eps).sqrt();
                inv_s[[ni, ci]] = is;
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (vx[[ni, ci, y, xx]] - mu) * is;
                        xhat[[ni, ci, y, xx]] = xh;
                        value[[ni, ci, y, xx]] = vg[ci] * xh + vb[ci];
                    }
                }
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let back: Option<BackFn<T>> = req.then(|| {
            let gamma_v = vg.to_owned();
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ndarray::Array4::<T>::zeros((n, c, h, w));
                let mut ggamma = Array1::<T>::zeros(c);
                let mut gbeta = Array1::<T>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        let is = inv_s[[ni, ci]];
                        let mut sum_gxh = T::zero();
                        let mut sum_gxh_xh = T::zero();
                        for y in 0..h {
                            for xx in 0..w {
                                let gh = g4[[ni, ci, y, xx]] * gamma_v[ci];
                                sum_gxh = sum_gxh + gh;
                                sum_gxh_xh = sum_gxh_xh + gh * xhat[[ni, ci, y, xx]];
                                ggamma[ci] = ggamma[ci] + g4[[ni, ci, y, xx]] * xhat[[ni, ci, y, xx]];
                                gbeta[ci] = gbeta[ci] + g4[[ni, ci, y, xx]];
                            }
                        }
                        let mean_gxh = sum_gxh / m;
                        let mean_gxh_xh = sum_gxh_xh / m;
                        for y in 0..h {
                            for xx in 0..w {
                                let gh = g4[[ni, ci, y, xx]] * gamma_v[ci];
                                gx[[ni, ci, y, xx]] =
                                    is * (gh - mean_gxh - xhat[[ni, ci, y, xx]] * mean_gxh_xh);
                            }
                        }
                    }
                }
                sink(x.0, gx.into_dyn());
                sink(gamma.0, ggamma.into_dyn());
                sink(beta.0, gbeta.into_dyn());
            }) as BackFn<T>
        });
        self.push(value.into_dyn(), "instance_norm", req, back)
    }

    // ---- spatial ------------------------------------------------------------

    /// Stride-1 convolution, `x [n,ci,h,w]` with kernel `w [co,ci,kh,kw]`.
    pub fn conv2d(&mut self, x: Tensor, wgt: Tensor, pad: Pad, dilation: usize) -> Tensor {
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("input 4-d");
        let vw = self.nodes[wgt.0].value.view().into_dimensionality::<Ix4>().expect("kernel 4-d");
        let (_, _, h, w) = vx.dim();
        let (_, _, kh, kw) = vw.dim();
        assert!(
            out_dims(h, w, kh, kw, pad, dilation).is_some(),
            "kernel {kh}x{kw} (dilation {dilation}) does not fit {h}x{w} input with {pad:?}"
        );
        let value = conv2d_forward(vx, vw, pad, dilation).into_dyn();
        let req = self.req(x) || self.req(wgt);
        let back: Option<BackFn<T>> = req.then(|| {
            let vx = vx.to_owned();
            let vw = vw.to_owned();
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (gx, gw) = conv2d_backward(vx.view(), vw.view(), g4, pad, dilation);
                sink(x.0, gx.into_dyn());
                sink(wgt.0, gw.into_dyn());
            }) as BackFn<T>
        });
        self.push(value, "conv2d", req, back)
    }

    /// Add a per-channel bias `[c]` to a `[n, c, h, w]` tensor.
    pub fn add_bias(&mut self, x: Tensor, b: Tensor) -> Tensor {
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("4-d");
        let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().expect("bias 1-d");
        let (n, c, h, w) = vx.dim();
        assert_eq!(vb.len(), c);
        let mut value = vx.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        value[[ni, ci, y, xx]] = value[[ni, ci, y, xx]] + vb[ci];
                    }
                }
            }
        }
        let req = self.req(x) || self.req(b);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gb = Array1::<T>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gb[ci] = gb[ci] + g4[[ni, ci, y, xx]];
                            }
                        }
                    }
                }
                sink(x.0, g.clone());
                sink(b.0, gb.into_dyn());
            }) as BackFn<T>
        });
        self.push(value.into_dyn(), "add_bias", req, back)
    }

    /// 2x2 average pooling (floor semantics: a trailing odd row/column is
    /// dropped and receives zero gradient).
    pub fn avg_pool2(&mut self, x: Tensor) -> Tensor {
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("4-d");
        let (n, c, h, w) = vx.dim();
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho > 0 && wo > 0, "avg_pool2 input too small: {h}x{w}");
        let quarter = T::of_f64(0.25);
        let mut value = ndarray::Array4::<T>::zeros((n, c, ho, wo));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let s = vx[[ni, ci, 2 * y, 2 * xx]]
                            + vx[[ni, ci, 2 * y, 2 * xx + 1]]
                            + vx[[ni, ci, 2 * y + 1, 2 * xx]]
                            + vx[[ni, ci, 2 * y + 1, 2 * xx + 1]];
                        value[[ni, ci, y, xx]] = s * quarter;
                    }
                }
            }
        }
        let req = self.req(x);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ndarray::Array4::<T>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gv = g4[[ni, ci, y, xx]] * quarter;
                                gx[[ni, ci, 2 * y, 2 * xx]] = gv;
                                gx[[ni, ci, 2 * y, 2 * xx + 1]] = gv;
                                gx[[ni, ci, 2 * y + 1, 2 * xx]] = gv;
                                gx[[ni, ci, 2 * y + 1, 2 * xx + 1]] = gv;
                            }
                        }
                    }
                }
                sink(x.0, gx.into_dyn());
            }) as BackFn<T>
        });
        self.push(value.into_dyn(), "avg_pool2", req, back)
    }

    /// Gather from the flattened (row-major) source: `out[j] = a.flat[idx[j]]`.
    /// Backward scatter-adds, so repeated indices accumulate gradient.
    pub fn gather_flat(&mut self, a: Tensor, idx: Arc<Vec<usize>>, out_shape: &[usize]) -> Tensor {
        let va = &self.nodes[a.0].value;
        let flat: Vec<T> = va.iter().copied().collect();
        assert_eq!(idx.len(), out_shape.iter().product::<usize>());
        let gathered: Vec<T> = idx.iter().map(|&i| flat[i]).collect();
        let value = ArrayD::from_shape_vec(IxDyn(out_shape), gathered).unwrap();
        let req = self.req(a);
        let in_shape = va.raw_dim();
        let in_len = va.len();
        let back: Option<BackFn<T>> = req.then(|| {
            let idx = Arc::clone(&idx);
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let mut gx = vec![T::zero(); in_len];
                for (j, gv) in g.iter().enumerate() {
                    gx[idx[j]] = gx[idx[j]] + *gv;
                }
                sink(a.0, ArrayD::from_shape_vec(in_shape.clone(), gx).unwrap());
            }) as BackFn<T>
        });
        self.push(value, "gather", req, back)
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample_nearest2(&mut self, x: Tensor) -> Tensor {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let mut idx = Vec::with_capacity(n * c * ho * wo);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        idx.push(((ni * c + ci) * h + y / 2) * w + xx / 2);
                    }
                }
            }
        }
        self.gather_flat(x, Arc::new(idx), &[n, c, ho, wo])
    }

    /// Select one element per row of a `[n, k]` matrix: `out[i] = a[i, js[i]]`.
    pub fn select_per_row(&mut self, a: Tensor, js: &[usize]) -> Tensor {
        let shape = self.nodes[a.0].value.shape().to_vec();
        assert_eq!(shape.len(), 2);
        let (n, k) = (shape[0], shape[1]);
        assert_eq!(js.len(), n);
        let idx: Vec<usize> = js.iter().enumerate().map(|(i, &j)| i * k + j).collect();
        self.gather_flat(a, Arc::new(idx), &[n])
    }

    /// Weighted patch assembly: paste `weights[i] * patch_rows[i]` at
    /// `positions[i]` into a `[1, c, h, w]` canvas, then divide each pixel
    /// by its precomputed cover count (overlaps average by contribution
    /// count). `patch_rows` is constant content; only `weights` is
    /// differentiable.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble_patches(
        &mut self,
        weights: Tensor,
        patch_rows: Arc<Array2<T>>,
        positions: Arc<Vec<(usize, usize)>>,
        window: (usize, usize),
        out_dims: (usize, usize, usize),
        counts: Arc<Array2<T>>,
    ) -> Tensor {
        let vw = self.nodes[weights.0].value.view().into_dimensionality::<Ix1>().expect("weights 1-d");
        let (c, h, w) = out_dims;
        let (sh, sw) = window;
        let np = positions.len();
        assert_eq!(vw.len(), np);
        assert_eq!(patch_rows.dim(), (np, c * sh * sw));
        assert_eq!(counts.dim(), (h, w));
        let mut out = ndarray::Array4::<T>::zeros((1, c, h, w));
        for i in 0..np {
            let (py, px) = positions[i];
            let wi = vw[i];
            for ci in 0..c {
                for dy in 0..sh {
                    for dx in 0..sw {
                        let v = patch_rows[[i, (ci * sh + dy) * sw + dx]];
                        out[[0, ci, py + dy, px + dx]] = out[[0, ci, py + dy, px + dx]] + wi * v;
                    }
                }
            }
        }
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    debug_assert!(counts[[y, xx]] > T::zero(), "uncovered pixel ({y},{xx})");
                    out[[0, ci, y, xx]] = out[[0, ci, y, xx]] / counts[[y, xx]];
                }
            }
        }
        let req = self.req(weights);
        let back: Option<BackFn<T>> = req.then(|| {
            let patch_rows = Arc::clone(&patch_rows);
            let positions = Arc::clone(&positions);
            let counts = Arc::clone(&counts);
            Box::new(move |g: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gw = Array1::<T>::zeros(np);
                for i in 0..np {
                    let (py, px) = positions[i];
                    let mut acc = T::zero();
                    for ci in 0..c {
                        for dy in 0..sh {
                            for dx in 0..sw {
                                let v = patch_rows[[i, (ci * sh + dy) * sw + dx]];
                                acc = acc + v * g4[[0, ci, py + dy, px + dx]] / counts[[py + dy, px + dx]];
                            }
                        }
                    }
                    gw[i] = acc;
                }
                sink(weights.0, gw.into_dyn());
            }) as BackFn<T>
        });
        self.push(out.into_dyn(), "assemble_patches", req, back)
    }

    // ---- composites (no own op name; built from the above) -------------------

    /// `mean(|a - b|)` as a scalar node.
    pub fn mean_abs_diff(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean_all(ad)
    }

    /// Squared Frobenius norm as a scalar node.
    pub fn frobenius_sq(&mut self, a: Tensor) -> Tensor {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_of(&mut self, ts: &[Tensor]) -> Tensor {
        assert!(!ts.is_empty());
        let mut acc = ts[0];
        for t in &ts[1..] {
            acc = self.add(acc, *t);
        }
        self.scale(acc, T::one() / T::from_usize(ts.len()).unwrap())
    }
}
