//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s in creation
//! order, so the node list is already topologically sorted. [`Graph::backward`]
//! consumes the graph and walks it in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    FlipGradient(Var),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    ChannelDot(Var, Rc<[f64]>),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MaskedMean(Var, Rc<[bool]>, usize),
    Gather(Var, Rc<[usize]>),
    Route(Var, Rc<[Option<usize>]>),
    NormalizeChannels(Var, f64),
    ShiftedDot {
        anchor: Var,
        other: Var,
        toward_right: bool,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{}: shapes {:?} and {:?} differ", what, a.shape(), b.shape());
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// Places a tensor on the graph; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push(t, Op::Leaf, tracked)
    }

    /// Differentiable copy of a parameter tensor.
    pub fn param(&self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var {
        let va = self.value(a);
        let out = f(&va);
        self.push(out, op, self.tracked(a))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        what: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, what)?;
        let out = zip(&va, &vb, f);
        Ok(self.push(out, op, self.tracked(a) || self.tracked(b)))
    }

    /// 2-D cross-correlation of a `[C_in, H, W]` input with a `[C_out, C_in, k, k]`
    /// kernel plus optional per-output-channel bias, zero padding on all sides.
    pub fn conv2d(&self, input: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let (vx, vk) = (self.value(input), self.value(kernel));
        let geom = ConvGeom::new(&vx, &vk, padding)?;
        let vb = bias.map(|b| self.value(b));
        let out = conv::forward(&vx, &vk, vb.as_deref(), &geom)?;
        let tracked =
            self.tracked(input) || self.tracked(kernel) || bias.is_some_and(|b| self.tracked(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            tracked,
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "hadamard", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |t| map(t, |v| v * s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |t| map(t, |v| v + s))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Identity whose backward pass is negated. A deliberately wrong gradient
    /// for checking that audits catch one.
    pub fn flip_gradient(&self, a: Var) -> Var {
        self.unary(a, Op::FlipGradient(a), |t| t.clone())
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |t| map(t, sigmoid))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |t| map(t, f64::tanh))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |t| map(t, |v| v.max(0.0)))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |t| map(t, f64::abs))
    }

    /// Softmax along the leading axis of a `[D, H, W]` tensor, independently per pixel.
    pub fn softmax_channels(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (d, h, w) = va.dims3()?;
        if d == 0 {
            bail!(Dimension, "softmax over zero channels");
        }
        if va.data().iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite score passed to softmax");
        }
        let hw = h * w;
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        for p in 0..hw {
            let m = (0..d).map(|c| x[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..d {
                let e = (x[c * hw + p] - m).exp();
                out[c * hw + p] = e;
                z += e;
            }
            for c in 0..d {
                out[c * hw + p] /= z;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![d, h, w], out),
            Op::Softmax(a),
            self.tracked(a),
        ))
    }

    /// `out[0, y, x] = sum_c weights[c] * a[c, y, x]`.
    pub fn channel_dot(&self, a: Var, weights: &[f64]) -> Result<Var> {
        let va = self.value(a);
        let (c, h, w) = va.dims3()?;
        if weights.len() != c {
            bail!(Dimension, "{} channel weights for {} channels", weights.len(), c);
        }
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for (ch, &wc) in weights.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&va.data()[ch * hw..(ch + 1) * hw]) {
                *o += wc * v;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![1, h, w], out),
            Op::ChannelDot(a, weights.into()),
            self.tracked(a),
        ))
    }

    /// Concatenation of `[C_i, H, W]` tensors along the channel axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Contract, "concat of nothing");
        }
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let (_, h, w) = values[0].dims3()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for v in &values {
            let (c, vh, vw) = v.dims3()?;
            if (vh, vw) != (h, w) {
                bail!(Dimension, "concat of {}x{} and {}x{} maps", h, w, vh, vw);
            }
            channels += c;
            data.extend_from_slice(v.data());
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::from_parts(vec![channels, h, w], data),
            Op::Concat(parts.to_vec()),
            tracked,
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, Op::Sum(a), |t| Tensor::scalar(t.data().iter().sum()))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(a, Op::Mean(a), |t| {
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        })
    }

    /// Mean over the elements whose mask entry is set.
    pub fn masked_mean(&self, a: Var, mask: &[bool]) -> Result<Var> {
        let va = self.value(a);
        if mask.len() != va.len() {
            bail!(Dimension, "mask of {} entries for {} values", mask.len(), va.len());
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            bail!(Contract, "masked mean over zero selected elements");
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        Ok(self.push(
            Tensor::scalar(s / count as f64),
            Op::MaskedMean(a, mask.into(), count),
            self.tracked(a),
        ))
    }

    /// Picks flat elements into a 1-d tensor.
    pub fn gather(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&i) = indices.iter().find(|&&i| i >= va.len()) {
            bail!(Dimension, "gather index {} out of {} elements", i, va.len());
        }
        let out = indices.iter().map(|&i| va.data()[i]).collect();
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], out),
            Op::Gather(a, indices.into()),
            self.tracked(a),
        ))
    }

    /// Same-shaped re-indexing: `out[i] = a[route[i]]`, or 0 where the route is empty.
    /// The routing itself carries no gradient; the routed values do.
    pub fn route(&self, a: Var, route: &[Option<usize>]) -> Result<Var> {
        let va = self.value(a);
        if route.len() != va.len() || route.iter().flatten().any(|&i| i >= va.len()) {
            bail!(Dimension, "route does not match a tensor of {} elements", va.len());
        }
        let out = route.iter().map(|r| r.map_or(0.0, |i| va.data()[i])).collect();
        Ok(self.push(
            Tensor::from_parts(va.shape().to_vec(), out),
            Op::Route(a, route.into()),
            self.tracked(a),
        ))
    }

    /// Scales every pixel's channel vector to unit length: `x / sqrt(|x|^2 + eps)`.
    pub fn normalize_channels(&self, a: Var, eps: f64) -> Result<Var> {
        let va = self.value(a);
        let (c, h, w) = va.dims3()?;
        let hw = h * w;
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        for p in 0..hw {
            let s: f64 = (0..c).map(|ch| x[ch * hw + p].powi(2)).sum();
            let n = (s + eps).sqrt();
            for ch in 0..c {
                out[ch * hw + p] = x[ch * hw + p] / n;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::NormalizeChannels(a, eps),
            self.tracked(a),
        ))
    }

    /// Correlation volume between two `[C, H, W]` feature maps.
    ///
    /// `out[d, y, x] = <anchor[:, y, x], other[:, y, x -/+ d]>` for `d` in `0..disparities`,
    /// shifting toward smaller `x` for the left view and larger `x` when
    /// `toward_right` is set. Candidates that fall outside the image take `fill`.
    pub fn shifted_dot(
        &self,
        anchor: Var,
        other: Var,
        disparities: usize,
        toward_right: bool,
        fill: f64,
    ) -> Result<Var> {
        let (va, vb) = (self.value(anchor), self.value(other));
        same_shape(&va, &vb, "shifted_dot")?;
        let (c, h, w) = va.dims3()?;
        let hw = h * w;
        let mut out = vec![fill; disparities * hw];
        for d in 0..disparities {
            for y in 0..h {
                for x in 0..w {
                    let Some(xs) = shift_col(x, d, w, toward_right) else {
                        continue;
                    };
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += va.data()[ch * hw + y * w + x] * vb.data()[ch * hw + y * w + xs];
                    }
                    out[d * hw + y * w + x] = s;
                }
            }
        }
        let tracked = self.tracked(anchor) || self.tracked(other);
        Ok(self.push(
            Tensor::from_parts(vec![disparities, h, w], out),
            Op::ShiftedDot {
                anchor,
                other,
                toward_right,
            },
            tracked,
        ))
    }

    /// Runs reverse-mode accumulation from a scalar loss and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        if nodes.is_empty() {
            bail!(Contract, "backward on an empty tape");
        }
        if nodes[loss.0].value.len() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            );
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[v.0].tracked {
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let (vx, vk) = (&nodes[input.0].value, &nodes[kernel.0].value);
                    let mut dx = nodes[input.0].tracked.then(|| vec![0.0; vx.len()]);
                    let mut dk = nodes[kernel.0].tracked.then(|| vec![0.0; vk.len()]);
                    let mut db = bias
                        .filter(|b| nodes[b.0].tracked)
                        .map(|_| vec![0.0; geom.c_out]);
                    conv::backward(
                        vx,
                        vk,
                        geom,
                        &g,
                        dx.as_deref_mut(),
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    for (v, d) in [(Some(*input), dx), (Some(*kernel), dk), (*bias, db)] {
                        if let (Some(v), Some(d)) = (v, d) {
                            acc(v, &mut |buf| add_into(buf, &d));
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| add_into(buf, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| {
                        buf.iter_mut().zip(&g).for_each(|(o, gi)| *o -= gi)
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                    acc(*a, &mut |buf| {
                        for ((o, gi), y) in buf.iter_mut().zip(&g).zip(vb.data()) {
                            *o += gi * y;
                        }
                    });
                    acc(*b, &mut |buf| {
                        for ((o, gi), x) in buf.iter_mut().zip(&g).zip(va.data()) {
                            *o += gi * x;
                        }
                    });
                }
                Op::Scale(a, s) => acc(*a, &mut |buf| {
                    buf.iter_mut().zip(&g).for_each(|(o, gi)| *o += s * gi)
                }),
                Op::FlipGradient(a) => acc(*a, &mut |buf| {
                    buf.iter_mut().zip(&g).for_each(|(o, gi)| *o -= gi)
                }),
                Op::AddScalar(a) => acc(*a, &mut |buf| add_into(buf, &g)),
                Op::Sigmoid(a) => acc(*a, &mut |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(&g).zip(out.data()) {
                        *o += gi * y * (1.0 - y);
                    }
                }),
                Op::Tanh(a) => acc(*a, &mut |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(&g).zip(out.data()) {
                        *o += gi * (1.0 - y * y);
                    }
                }),
                Op::Relu(a) => {
                    let va = nodes[a.0].value.clone();
                    acc(*a, &mut |buf| {
                        for ((o, gi), x) in buf.iter_mut().zip(&g).zip(va.data()) {
                            if *x > 0.0 {
                                *o += gi;
                            }
                        }
                    })
                }
                Op::Abs(a) => {
                    let va = nodes[a.0].value.clone();
                    acc(*a, &mut |buf| {
                        for ((o, gi), x) in buf.iter_mut().zip(&g).zip(va.data()) {
                            if *x > 0.0 {
                                *o += gi;
                            } else if *x < 0.0 {
                                *o -= gi;
                            }
                        }
                    })
                }
                Op::Softmax(a) => {
                    let [d, h, w] = out.shape()[..] else { unreachable!() };
                    let hw = h * w;
                    let p = out.data();
                    acc(*a, &mut |buf| {
                        for px in 0..hw {
                            let dot: f64 = (0..d).map(|c| p[c * hw + px] * g[c * hw + px]).sum();
                            for c in 0..d {
                                let i = c * hw + px;
                                buf[i] += p[i] * (g[i] - dot);
                            }
                        }
                    })
                }
                Op::ChannelDot(a, weights) => {
                    let hw = g.len();
                    acc(*a, &mut |buf| {
                        for (c, &wc) in weights.iter().enumerate() {
                            for (o, gi) in buf[c * hw..(c + 1) * hw].iter_mut().zip(&g) {
                                *o += wc * gi;
                            }
                        }
                    })
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.len();
                        let slice = &g[offset..offset + n];
                        acc(p, &mut |buf| add_into(buf, slice));
                        offset += n;
                    }
                }
                Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
                Op::Mean(a) => acc(*a, &mut |buf| {
                    let s = g[0] / buf.len() as f64;
                    buf.iter_mut().for_each(|o| *o += s)
                }),
                Op::MaskedMean(a, mask, count) => acc(*a, &mut |buf| {
                    let s = g[0] / *count as f64;
                    for (o, &m) in buf.iter_mut().zip(mask.iter()) {
                        if m {
                            *o += s;
                        }
                    }
                }),
                Op::Gather(a, idx) => acc(*a, &mut |buf| {
                    for (&i, gi) in idx.iter().zip(&g) {
                        buf[i] += gi;
                    }
                }),
                Op::Route(a, route) => acc(*a, &mut |buf| {
                    for (r, gi) in route.iter().zip(&g) {
                        if let Some(i) = r {
                            buf[*i] += gi;
                        }
                    }
                }),
                Op::NormalizeChannels(a, eps) => {
                    let va = nodes[a.0].value.clone();
                    let [c, h, w] = va.shape()[..] else { unreachable!() };
                    let hw = h * w;
                    let x = va.data();
                    acc(*a, &mut |buf| {
                        for px in 0..hw {
                            let s: f64 = (0..c).map(|ch| x[ch * hw + px].powi(2)).sum();
                            let n = (s + eps).sqrt();
                            let gx: f64 = (0..c).map(|ch| g[ch * hw + px] * x[ch * hw + px]).sum();
                            for ch in 0..c {
                                let i = ch * hw + px;
                                buf[i] += g[i] / n - x[i] * gx / (n * n * n);
                            }
                        }
                    })
                }
                Op::ShiftedDot {
                    anchor,
                    other,
                    toward_right,
                } => {
                    let (va, vb) = (nodes[anchor.0].value.clone(), nodes[other.0].value.clone());
                    let [c, h, w] = va.shape()[..] else { unreachable!() };
                    let hw = h * w;
                    let disparities = out.shape()[0];
                    let visit = |f: &mut dyn FnMut(usize, usize, f64)| {
                        for d in 0..disparities {
                            for y in 0..h {
                                for x in 0..w {
                                    if let Some(xs) = shift_col(x, d, w, *toward_right) {
                                        f(y * w + x, y * w + xs, g[d * hw + y * w + x]);
                                    }
                                }
                            }
                        }
                    };
                    acc(*anchor, &mut |buf| {
                        visit(&mut |p, q, gi| {
                            for ch in 0..c {
                                buf[ch * hw + p] += gi * vb.data()[ch * hw + q];
                            }
                        })
                    });
                    acc(*other, &mut |buf| {
                        visit(&mut |p, q, gi| {
                            for ch in 0..c {
                                buf[ch * hw + q] += gi * va.data()[ch * hw + p];
                            }
                        })
                    });
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.tracked) {
                (Op::Leaf, true) => Some(Tensor::from_parts(
                    node.value.shape().to_vec(),
                    g.unwrap_or_else(|| vec![0.0; node.value.len()]),
                )),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
}

/// Column matched by disparity `d`: `x - d` for left-view anchors, `x + d` otherwise.
pub(crate) fn shift_col(x: usize, d: usize, width: usize, toward_right: bool) -> Option<usize> {
    if toward_right {
        (x + d < width).then_some(x + d)
    } else {
        x.checked_sub(d)
    }
}

/// Gradients of the differentiable leaves of a consumed [`Graph`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a tracked leaf; `None` for constants and intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, Some(b), 0).unwrap();
        assert_eq!(g.value(y).data(), &[2.0; 9]);
    }

    #[test]
    fn conv_zero_kernel_yields_bias() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f64 + 1.0));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = g.constant(t(&[1], &[5.0]));
        let y = g.conv2d(x, k, Some(b), 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        assert_eq!(g.value(y).data(), &[5.0; 9]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let even = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(g.conv2d(x, even, None, 0), Err(crate::Error::Config(_))));
        let wrong = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, wrong, None, 1), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn pointwise_basics() {
        let g = Graph::new();
        let z = g.constant(Tensor::zeros(&[4]));
        assert_eq!(g.value(g.sigmoid(z)).data(), &[0.5; 4]);
        assert_eq!(g.value(g.tanh(z)).data(), &[0.0; 4]);
        let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.constant(t(&[3], &[4.0, 5.0, 6.0]));
        assert_eq!(g.value(g.mul(a, b).unwrap()).data(), &[4.0, 10.0, 18.0]);
        assert!(g.add(a, z).is_err());
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!(sigmoid(-40.0) > 0.0);
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let s = g.constant(Tensor::full(&[4, 1, 1], 3.0));
        let p = g.softmax_channels(s).unwrap();
        assert_eq!(g.value(p).data(), &[0.25; 4]);

        let s = g.constant(t(&[3, 1, 1], &[0.0, -10.0, -10.0]));
        let p = g.value(g.softmax_channels(s).unwrap());
        // exp(0) / (1 + 2 exp(-10)) and exp(-10) / (1 + 2 exp(-10))
        let z = 1.0 + 2.0 * (-10f64).exp();
        assert!((p.data()[0] - 1.0 / z).abs() < 1e-15);
        assert!((p.data()[0] - 0.999909).abs() < 1e-6);
        assert!((p.data()[1] - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn backward_examples() {
        let g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad(true));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad(true));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]).with_grad(true));
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn untouched_leaves_get_zero_gradients() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 2]).with_grad(true));
        let unused = g.leaf(Tensor::zeros(&[3]).with_grad(true));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
        assert_eq!(grads.get(x).unwrap().shape(), &[1, 2, 2]);
    }

    #[test]
    fn masked_mean_needs_a_selected_element() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        assert!(g.masked_mean(x, &[false, false]).is_err());
        let m = g.masked_mean(x, &[true, false]).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 0.0);
    }

    #[test]
    fn route_fills_holes_with_zero() {
        let g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let r = g.route(x, &[Some(2), None, Some(0)]).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 0.0, 1.0]);
    }
}
