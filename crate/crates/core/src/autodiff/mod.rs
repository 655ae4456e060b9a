//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for every node that (transitively) depends on a leaf created with
//! `requires_grad = true`. Nodes with no such dependency carry no backward
//! closure, so evaluation-mode passes cost nothing extra.

mod conv;
mod norm;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Real, Tensor};

pub use conv::ConvSpec;
pub use norm::BatchStats;

/// Gradient closure: receives the output gradient and a mask saying which
/// parents need a gradient, returns one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_rc(Rc::new(value), requires_grad)
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Record a custom operation. `backward` is dropped when none of the
    /// parents requires a gradient.
    pub fn push_op(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: ids,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.numel(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Gradients of interior nodes are not needed once propagated,
            // except for leaves which are kept for the caller.
            if !node.parents.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(grad);
            }
        }
        Gradients { grads }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(
        self,
        out: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var<'t, T> {
        self.tape.push_op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(backward(g))]),
        )
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape.push_op(
            out,
            &[self, other],
            Box::new(|g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.clone()),
                ]
            }),
        )
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape.push_op(
            out,
            &[self, other],
            Box::new(|g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.map(|v| -v)),
                ]
            }),
        )
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.push_op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                    needs[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
                ]
            }),
        )
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * s);
        self.unary(out, move |g| g.map(|v| v * s))
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + s);
        self.unary(out, |g| g.clone())
    }

    pub fn square(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v * v);
        let two = T::lit(2.0);
        self.unary(out, move |g| g.zip_map(&x, |gv, xv| two * gv * xv))
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(out, move |g| {
            g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(sigmoid);
        let y = out.clone();
        self.unary(out, move |g| {
            g.zip_map(&y, |gv, yv| gv * yv * (T::one() - yv))
        })
    }

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Var<'t, T> {
        let x = self.value();
        let cols = *x.shape().last().expect("softmax of a scalar");
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let y = out.clone();
        self.unary(out, move |g| {
            let mut dx = g.clone();
            for (dr, yr) in dx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (d, &yv) in dr.iter_mut().zip(yr) {
                    *d = yv * (*d - dot);
                }
            }
            dx
        })
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.unary(out, move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// `Σ_k weights[offset + k] · xs[k]`; entries of `xs` that are `None`
    /// stand for exact zeros.
    pub fn mix(xs: &[Option<Var<'t, T>>], weights: Var<'t, T>, offset: usize) -> Var<'t, T> {
        let present: Vec<(usize, Var<'t, T>)> = xs
            .iter()
            .enumerate()
            .filter_map(|(k, x)| x.map(|x| (k, x)))
            .collect();
        assert!(!present.is_empty(), "mix needs at least one non-zero input");
        let w = weights.value();
        let shape = present[0].1.shape();
        let mut out = Tensor::zeros(&shape);
        let values: Vec<Rc<Tensor<T>>> = present.iter().map(|(_, x)| x.value()).collect();
        for ((k, _), v) in present.iter().zip(&values) {
            let wk = w.data()[offset + k];
            for (o, &xv) in out.data_mut().iter_mut().zip(v.data()) {
                *o += wk * xv;
            }
        }
        let mut parents: Vec<Var<'t, T>> = present.iter().map(|(_, x)| *x).collect();
        parents.push(weights);
        let slots: Vec<usize> = present.iter().map(|(k, _)| offset + k).collect();
        let w_shape = w.shape().to_vec();
        weights.tape.push_op(
            out,
            &parents,
            Box::new(move |g, needs| {
                let n = slots.len();
                let mut grads: Vec<Option<Tensor<T>>> = (0..n)
                    .map(|i| needs[i].then(|| g.map(|gv| gv * w.data()[slots[i]])))
                    .collect();
                grads.push(needs[n].then(|| {
                    let mut gw = Tensor::zeros(&w_shape);
                    for (i, v) in values.iter().enumerate() {
                        let dot: T = g.data().iter().zip(v.data()).map(|(&a, &b)| a * b).sum();
                        gw.data_mut()[slots[i]] = dot;
                    }
                    gw
                }));
                grads
            }),
        )
    }

    pub fn add_all(xs: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!xs.is_empty(), "add_all of nothing");
        let mut out = xs[0].value().as_ref().clone();
        for x in &xs[1..] {
            out.add_assign(&x.value());
        }
        xs[0].tape.push_op(
            out,
            xs,
            Box::new(|g, needs| needs.iter().map(|&n| n.then(|| g.clone())).collect()),
        )
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(xs: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!xs.is_empty(), "concat of nothing");
        let values: Vec<Rc<Tensor<T>>> = xs.iter().map(|x| x.value()).collect();
        let (n, _, h, w) = values[0].dims4();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, c, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat shape mismatch");
                c
            })
            .collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        {
            let od = out.data_mut();
            for b in 0..n {
                let mut c0 = 0;
                for (v, &c) in values.iter().zip(&chans) {
                    let src = &v.data()[b * c * plane..(b + 1) * c * plane];
                    let dst = (b * total + c0) * plane;
                    od[dst..dst + c * plane].copy_from_slice(src);
                    c0 += c;
                }
            }
        }
        xs[0].tape.push_op(
            out,
            xs,
            Box::new(move |g, needs| {
                let mut c0 = 0;
                let mut grads = Vec::with_capacity(chans.len());
                for (i, &c) in chans.iter().enumerate() {
                    if needs[i] {
                        let mut gi = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let s = (b * total + c0) * plane;
                            gi.extend_from_slice(&g.data()[s..s + c * plane]);
                        }
                        grads.push(Some(Tensor::from_vec(&[n, c, h, w], gi)));
                    } else {
                        grads.push(None);
                    }
                    c0 += c;
                }
                grads
            }),
        )
    }

    /// Mean over spatial positions: NCHW → N×C.
    pub fn global_avg_pool(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let data: Vec<T> = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[n, c], data);
        self.unary(out, move |g| {
            let mut dx = Vec::with_capacity(n * c * plane);
            for &gv in g.data() {
                dx.extend(std::iter::repeat(gv * inv).take(plane));
            }
            Tensor::from_vec(&[n, c, h, w], dx)
        })
    }

    /// Affine map `x·Wᵀ + b` with `x: B×I`, `W: O×I`, `b: O`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let (bsz, din) = x.dims2();
        let (dout, win) = w.dims2();
        assert_eq!(din, win, "linear: input width {din} vs weight {win}");
        let mut out = vec![T::zero(); bsz * dout];
        let bvals = bias.map(|b| b.value());
        for r in 0..bsz {
            let xr = &x.data()[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &w.data()[o * din..(o + 1) * din];
                let mut acc: T = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                if let Some(b) = &bvals {
                    acc += b.data()[o];
                }
                out[r * dout + o] = acc;
            }
        }
        let out = Tensor::from_vec(&[bsz, dout], out);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.tape.push_op(
            out,
            &parents,
            Box::new(move |g, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); bsz * din];
                    for r in 0..bsz {
                        let dr = &mut dx[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = gd[r * dout + o];
                            let wr = &w.data()[o * din..(o + 1) * din];
                            for (d, &wv) in dr.iter_mut().zip(wr) {
                                *d += gv * wv;
                            }
                        }
                    }
                    Tensor::from_vec(&[bsz, din], dx)
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![T::zero(); dout * din];
                    for r in 0..bsz {
                        let xr = &x.data()[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = gd[r * dout + o];
                            for (d, &xv) in dw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                    Tensor::from_vec(&[dout, din], dw)
                });
                let mut grads = vec![dx, dw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut db = vec![T::zero(); dout];
                        for r in 0..bsz {
                            for o in 0..dout {
                                db[o] += gd[r * dout + o];
                            }
                        }
                        Tensor::from_vec(&[dout], db)
                    }));
                }
                grads
            }),
        )
    }

    /// `scale · selfᵀ · other` for `self: B×P`, `other: B×Q`, giving P×Q.
    pub fn matmul_tn(self, other: Var<'t, T>, scale: T) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let (rows, p) = a.dims2();
        let (rows_b, q) = b.dims2();
        assert_eq!(rows, rows_b, "matmul_tn: row mismatch");
        let mut out = vec![T::zero(); p * q];
        for r in 0..rows {
            let ar = &a.data()[r * p..(r + 1) * p];
            let br = &b.data()[r * q..(r + 1) * q];
            for (i, &av) in ar.iter().enumerate() {
                let row = &mut out[i * q..(i + 1) * q];
                for (o, &bv) in row.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
        for v in &mut out {
            *v *= scale;
        }
        let out = Tensor::from_vec(&[p, q], out);
        self.tape.push_op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let gd = g.data();
                let da = needs[0].then(|| {
                    let mut da = vec![T::zero(); rows * p];
                    for r in 0..rows {
                        let br = &b.data()[r * q..(r + 1) * q];
                        for i in 0..p {
                            let gr = &gd[i * q..(i + 1) * q];
                            let dot: T = gr.iter().zip(br).map(|(&x, &y)| x * y).sum();
                            da[r * p + i] = dot * scale;
                        }
                    }
                    Tensor::from_vec(&[rows, p], da)
                });
                let db = needs[1].then(|| {
                    let mut db = vec![T::zero(); rows * q];
                    for r in 0..rows {
                        let ar = &a.data()[r * p..(r + 1) * p];
                        let dr = &mut db[r * q..(r + 1) * q];
                        for (i, &av) in ar.iter().enumerate() {
                            let gr = &gd[i * q..(i + 1) * q];
                            for (d, &gv) in dr.iter_mut().zip(gr) {
                                *d += av * gv;
                            }
                        }
                        for d in dr.iter_mut() {
                            *d *= scale;
                        }
                    }
                    Tensor::from_vec(&[rows, q], db)
                });
                vec![da, db]
            }),
        )
    }

    /// Adds a constant per-column offset to every row of a matrix.
    pub fn add_row_offset(self, offset: &[T]) -> Var<'t, T> {
        let x = self.value();
        let (_, cols) = x.dims2();
        assert_eq!(cols, offset.len(), "offset width mismatch");
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (v, &o) in row.iter_mut().zip(offset) {
                *v += o;
            }
        }
        self.unary(out, |g| g.clone())
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
