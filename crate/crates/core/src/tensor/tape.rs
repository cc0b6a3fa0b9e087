use std::cell::{Cell, RefCell};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Rounds to the nearest integer, resolving exact halves to the even
/// neighbour.
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// How [`Var::clip_with`] treats the gradient at exactly `r1` or `r2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipBoundary {
    /// Gradient 1 on the closed interval `[r1, r2]`.
    Inclusive,
    /// Gradient 1 only on the open interval `(r1, r2)`.
    Exclusive,
}

/// Per-channel batch statistics (biased variance) observed by
/// [`Var::batch_norm_train`], with the reduction count that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    DivScalar(usize, usize),
    /// Detach and round carry no gradient.
    NoGrad,
    Clip {
        x: usize,
        lo: f64,
        hi: f64,
        boundary: ClipBoundary,
    },
    Relu(usize),
    Reshape(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    AddChannel {
        x: usize,
        b: usize,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Sum(usize),
    Mean(usize),
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftCe {
        logits: usize,
        targets: Vec<f64>,
        probs: Vec<f64>,
        temperature: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in execution order so that gradients can
/// be propagated in one reverse sweep.
///
/// A tape is meant to live for one forward/backward pass. Calling
/// [`Tape::backward`] twice without [`Tape::zero_grad`] in between is an
/// error instead of silently accumulating.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    backward_done: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    /// Register a tensor as a leaf.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Shorthand for a leaf with `requires_grad = true`.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Shorthand for a leaf with `requires_grad = false`.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Propagate `d loss / d node` to every node that needs a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss belongs to a different tape".into()));
        }
        if self.backward_done.get() {
            return Err(Error::Usage(
                "backward called twice without zero_grad".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].needs_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, &mut grads, node, &g);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    /// Drop accumulated gradients so that `backward` may run again.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Gradient of the last backward pass with respect to `var`; `None` for
    /// tensors that do not require gradients or were not reached.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let ch = shape.get(1).copied().unwrap_or(1);
    let inner = shape.iter().skip(2).product::<usize>();
    (outer, ch, inner)
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf | Op::NoGrad => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            accumulate(grads, nodes, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect()),
        Op::MulScalar(a, s) => {
            let sv = val(*s)[0];
            let av = val(*a);
            accumulate(grads, nodes, *a, g.iter().map(|v| v * sv).collect());
            let gs: f64 = g.iter().zip(av).map(|(g, a)| g * a).sum();
            accumulate(grads, nodes, *s, vec![gs]);
        }
        Op::DivScalar(a, s) => {
            let sv = val(*s)[0];
            let av = val(*a);
            accumulate(grads, nodes, *a, g.iter().map(|v| v / sv).collect());
            let gs: f64 = g.iter().zip(av).map(|(g, a)| -g * a / (sv * sv)).sum();
            accumulate(grads, nodes, *s, vec![gs]);
        }
        Op::Clip {
            x,
            lo,
            hi,
            boundary,
        } => {
            let pass = |v: f64| match boundary {
                ClipBoundary::Inclusive => *lo <= v && v <= *hi,
                ClipBoundary::Exclusive => *lo < v && v < *hi,
            };
            let gx = g
                .iter()
                .zip(val(*x))
                .map(|(g, &v)| if pass(v) { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::Relu(x) => {
            let gx = g
                .iter()
                .zip(val(*x))
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, g.to_vec()),
        Op::MatMul { a, b, m, k, n } => {
            if nodes[*a].needs_grad {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(*m, *n, *k, g, false, val(*b), true, &mut ga, 0.0);
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].needs_grad {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(*k, *m, *n, val(*a), true, g, false, &mut gb, 0.0);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Conv2d { x, w, geom, cols } => {
            let hw = geom.out_h() * geom.out_w();
            let rows = geom.patch_rows();
            let ncols = geom.patch_cols();
            let grows = kernels::nchw_to_rows(g, geom.batch, geom.out_ch, hw);
            if nodes[*w].needs_grad {
                let mut gw = vec![0.0; geom.out_ch * ncols];
                kernels::gemm(geom.out_ch, rows, ncols, &grows, true, cols, false, &mut gw, 0.0);
                accumulate(grads, nodes, *w, gw);
            }
            if nodes[*x].needs_grad {
                let mut gcols = vec![0.0; rows * ncols];
                kernels::gemm(rows, geom.out_ch, ncols, &grows, false, val(*w), false, &mut gcols, 0.0);
                accumulate(grads, nodes, *x, kernels::col2im(&gcols, geom));
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let mut gx = vec![0.0; nodes[*x].value.numel()];
            for (gi, &src) in g.iter().zip(argmax) {
                gx[src] += gi;
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::AddChannel { x, b } => {
            accumulate(grads, nodes, *x, g.to_vec());
            let (outer, ch, inner) = channel_layout(node.value.shape());
            let mut gb = vec![0.0; ch];
            for o in 0..outer {
                for (c, gbc) in gb.iter_mut().enumerate() {
                    let base = (o * ch + c) * inner;
                    *gbc += g[base..base + inner].iter().sum::<f64>();
                }
            }
            accumulate(grads, nodes, *b, gb);
        }
        Op::Norm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (outer, ch, inner) = channel_layout(node.value.shape());
            let gam = val(*gamma);
            let mut ggamma = vec![0.0; ch];
            let mut gbeta = vec![0.0; ch];
            let mut sum_dxhat = vec![0.0; ch];
            let mut sum_dxhat_xhat = vec![0.0; ch];
            for o in 0..outer {
                for c in 0..ch {
                    let base = (o * ch + c) * inner;
                    for i in base..base + inner {
                        ggamma[c] += g[i] * xhat[i];
                        gbeta[c] += g[i];
                        let d = g[i] * gam[c];
                        sum_dxhat[c] += d;
                        sum_dxhat_xhat[c] += d * xhat[i];
                    }
                }
            }
            if nodes[*x].needs_grad {
                let m = (outer * inner) as f64;
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in base..base + inner {
                            let d = g[i] * gam[c];
                            gx[i] = if *batch_stats {
                                inv_std[c] / m * (m * d - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c])
                            } else {
                                d * inv_std[c]
                            };
                        }
                    }
                }
                accumulate(grads, nodes, *x, gx);
            }
            accumulate(grads, nodes, *gamma, ggamma);
            accumulate(grads, nodes, *beta, gbeta);
        }
        Op::Sum(x) => accumulate(grads, nodes, *x, vec![g[0]; nodes[*x].value.numel()]),
        Op::Mean(x) => {
            let n = nodes[*x].value.numel();
            accumulate(grads, nodes, *x, vec![g[0] / n as f64; n]);
        }
        Op::SoftmaxCe {
            logits,
            labels,
            probs,
        } => {
            let n = labels.len();
            let k = probs.len() / n;
            let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0] / n as f64).collect();
            for (row, &y) in labels.iter().enumerate() {
                gl[row * k + y] -= g[0] / n as f64;
            }
            accumulate(grads, nodes, *logits, gl);
        }
        Op::SoftCe {
            logits,
            targets,
            probs,
            temperature,
        } => {
            let n = nodes[*logits].value.shape()[0] as f64;
            let gl = probs
                .iter()
                .zip(targets)
                .map(|(p, t)| g[0] * temperature * (p - t) / n)
                .collect();
            accumulate(grads, nodes, *logits, gl);
        }
    }
}

/// Row-wise softmax of a `[rows, k]` slice at temperature `t`.
pub(crate) fn softmax_rows(z: &[f64], k: usize, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
        let exps: Vec<f64> = row.iter().map(|&v| (v / t - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("operands live on different tapes".into()))
        }
    }

    fn emit(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let needs = self.tape.needs_grad(inputs);
        self.tape.push(value, op, needs)
    }

    fn zip_same(&self, other: Var<'_>, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(other)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, |a, b| a + b)?;
        Ok(self.emit(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, |a, b| a - b)?;
        Ok(self.emit(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, |a, b| a * b)?;
        Ok(self.emit(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// Multiply by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.with_value(|t| t.map(|x| x * c));
        self.emit(v, Op::Scale(self.id, c), &[self.id])
    }

    fn scalar_of(&self, s: Var<'_>) -> Result<f64> {
        self.same_tape(s)?;
        s.with_value(|t| t.item())
    }

    /// Multiply every element by the one-element tensor `s`; differentiable
    /// in both operands.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = self.scalar_of(s)?;
        let v = self.with_value(|t| t.map(|x| x * sv));
        Ok(self.emit(v, Op::MulScalar(self.id, s.id), &[self.id, s.id]))
    }

    /// Divide every element by the one-element tensor `s`.
    pub fn div_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = self.scalar_of(s)?;
        let v = self.with_value(|t| t.map(|x| x / sv));
        Ok(self.emit(v, Op::DivScalar(self.id, s.id), &[self.id, s.id]))
    }

    /// Identity in the forward pass, zero gradient in the backward pass.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.push(v, Op::NoGrad, false)
    }

    /// Elementwise round-half-even. Carries no gradient; see
    /// [`crate::quant::roundpass`] for the straight-through variant.
    pub fn round(self) -> Var<'t> {
        let v = self.with_value(|t| t.map(round_half_even));
        self.tape.push(v, Op::NoGrad, false)
    }

    /// Clamp to `[r1, r2]`; gradient passes on the closed interval.
    pub fn clip(self, r1: f64, r2: f64) -> Result<Var<'t>> {
        self.clip_with(r1, r2, ClipBoundary::Inclusive)
    }

    pub fn clip_with(self, r1: f64, r2: f64, boundary: ClipBoundary) -> Result<Var<'t>> {
        if r1.is_nan() || r2.is_nan() || r1 > r2 {
            return Err(Error::Argument(format!("clip bounds {r1} > {r2}")));
        }
        let v = self.with_value(|t| t.map(|x| x.clamp(r1, r2)));
        Ok(self.emit(
            v,
            Op::Clip {
                x: self.id,
                lo: r1,
                hi: r2,
                boundary,
            },
            &[self.id],
        ))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.with_value(|t| t.map(|x| x.max(0.0)));
        self.emit(v, Op::Relu(self.id), &[self.id])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.emit(v, Op::Reshape(self.id), &[self.id]))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (out, m, k, n) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::Dimension(format!("matmul {sa:?} · {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
            (Tensor::new([m, n], c)?, m, k, n)
        };
        Ok(self.emit(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            &[self.id, other.id],
        ))
    }

    /// Cross-correlation of `self: [N, C, H, W]` with `w: [F, C, kH, kW]`.
    pub fn conv2d(self, w: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(w)?;
        let (out, geom, cols) = {
            let nodes = self.tape.nodes.borrow();
            let (x, wt) = (&nodes[self.id].value, &nodes[w.id].value);
            let geom = conv_geom(x.shape(), wt.shape(), stride, pad)?;
            let cols = kernels::im2col(x.data(), &geom);
            let rows = geom.patch_rows();
            let mut y = vec![0.0; rows * geom.out_ch];
            kernels::gemm(rows, geom.patch_cols(), geom.out_ch, &cols, false, wt.data(), true, &mut y, 0.0);
            let hw = geom.out_h() * geom.out_w();
            let y = kernels::rows_to_nchw(&y, geom.batch, geom.out_ch, hw);
            let out = Tensor::new([geom.batch, geom.out_ch, geom.out_h(), geom.out_w()], y)?;
            (out, geom, cols)
        };
        Ok(self.emit(
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                geom,
                cols,
            },
            &[self.id, w.id],
        ))
    }

    /// 2×2 max pooling with stride 2 over `[N, C, H, W]`; odd trailing rows
    /// and columns are dropped.
    pub fn max_pool2(self) -> Result<Var<'t>> {
        let (out, argmax) = self.with_value(|x| -> Result<_> {
            let s = x.shape();
            if s.len() != 4 || s[2] < 2 || s[3] < 2 {
                return Err(Error::Dimension(format!("max_pool2 on {s:?}")));
            }
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (h / 2, w / 2);
            let mut data = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            let xd = x.data();
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + 2 * oy * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                        data.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
            Ok((Tensor::new([n, c, oh, ow], data)?, argmax))
        })?;
        Ok(self.emit(out, Op::MaxPool2 { x: self.id, argmax }, &[self.id]))
    }

    /// Add a per-channel bias `b: [C]` along axis 1.
    pub fn add_channel(self, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(b)?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (x, bv) = (&nodes[self.id].value, &nodes[b.id].value);
            let (outer, ch, inner) = channel_layout(x.shape());
            if bv.numel() != ch || x.shape().len() < 2 {
                return Err(Error::Dimension(format!(
                    "bias of {} values for input {:?}",
                    bv.numel(),
                    x.shape()
                )));
            }
            let mut data = x.data().to_vec();
            for o in 0..outer {
                for c in 0..ch {
                    let base = (o * ch + c) * inner;
                    data[base..base + inner].iter_mut().for_each(|v| *v += bv.data()[c]);
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.emit(out, Op::AddChannel { x: self.id, b: b.id }, &[self.id, b.id]))
    }

    /// Per-channel normalization using the statistics of this batch.
    pub fn batch_norm_train(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, BatchStats)> {
        let (out, xhat, inv_std, stats) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (outer, ch, inner) = self.norm_layout(&nodes, gamma, beta)?;
            let count = outer * inner;
            let xd = x.data();
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for o in 0..outer {
                for (c, m) in mean.iter_mut().enumerate() {
                    let base = (o * ch + c) * inner;
                    *m += xd[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for o in 0..outer {
                for c in 0..ch {
                    let base = (o * ch + c) * inner;
                    var[c] += xd[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (out, xhat) = normalize(x, &nodes[gamma.id].value, &nodes[beta.id].value, &mean, &inv_std);
            (out, xhat, inv_std, BatchStats { mean, var, count })
        };
        let v = self.emit(
            out,
            Op::Norm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[self.id, gamma.id, beta.id],
        );
        Ok((v, stats))
    }

    /// Per-channel normalization with fixed statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var<'t>> {
        let (out, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let (_, ch, _) = self.norm_layout(&nodes, gamma, beta)?;
            if mean.len() != ch || var.len() != ch {
                return Err(Error::Dimension("running statistics length".into()));
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (out, xhat) = normalize(
                &nodes[self.id].value,
                &nodes[gamma.id].value,
                &nodes[beta.id].value,
                mean,
                &inv_std,
            );
            (out, xhat, inv_std)
        };
        Ok(self.emit(
            out,
            Op::Norm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    fn norm_layout(&self, nodes: &[Node], gamma: Var<'_>, beta: Var<'_>) -> Result<(usize, usize, usize)> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = &nodes[self.id].value;
        if x.shape().len() < 2 {
            return Err(Error::Dimension(format!("norm on {:?}", x.shape())));
        }
        let layout = channel_layout(x.shape());
        if nodes[gamma.id].value.numel() != layout.1 || nodes[beta.id].value.numel() != layout.1 {
            return Err(Error::Dimension("norm parameter length".into()));
        }
        Ok(layout)
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.with_value(|t| t.data().iter().sum::<f64>());
        self.emit(Tensor::scalar(v), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.with_value(|t| t.data().iter().sum::<f64>() / t.numel() as f64);
        self.emit(Tensor::scalar(v), Op::Mean(self.id), &[self.id])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = self.with_value(|z| -> Result<_> {
            let k = logits_width(z, labels.len())?;
            if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                return Err(Error::Data(format!("label {bad} outside 0..{k}")));
            }
            let probs = softmax_rows(z.data(), k, 1.0);
            let mut total = 0.0;
            for (row, &y) in z.data().chunks(k).zip(labels) {
                total += log_sum_exp(row) - row[y];
            }
            Ok((total / labels.len() as f64, probs))
        })?;
        Ok(self.emit(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            &[self.id],
        ))
    }

    /// Cross entropy against fixed soft targets at temperature `t`, scaled
    /// by `t²` so that gradient magnitudes do not depend on `t`.
    pub fn soft_cross_entropy(self, targets: &Tensor, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(Error::Argument(format!("temperature {temperature}")));
        }
        let (loss, probs) = self.with_value(|z| -> Result<_> {
            if z.shape() != targets.shape() || z.shape().len() != 2 {
                return Err(Error::Dimension(format!(
                    "soft targets {:?} vs logits {:?}",
                    targets.shape(),
                    z.shape()
                )));
            }
            let (n, k) = (z.shape()[0], z.shape()[1]);
            let probs = softmax_rows(z.data(), k, temperature);
            let mut total = 0.0;
            for (row, trow) in z.data().chunks(k).zip(targets.data().chunks(k)) {
                let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
                let lse = log_sum_exp(&scaled);
                total += trow.iter().zip(&scaled).map(|(t, s)| -t * (s - lse)).sum::<f64>();
            }
            Ok((temperature * temperature * total / n as f64, probs))
        })?;
        Ok(self.emit(
            Tensor::scalar(loss),
            Op::SoftCe {
                logits: self.id,
                targets: targets.data().to_vec(),
                probs,
                temperature,
            },
            &[self.id],
        ))
    }
}

fn logits_width(z: &Tensor, batch: usize) -> Result<usize> {
    let s = z.shape();
    if s.len() != 2 || s[0] != batch {
        return Err(Error::Dimension(format!(
            "logits {s:?} for {batch} labels"
        )));
    }
    Ok(s[1])
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn normalize(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Vec<f64>) {
    let (outer, ch, inner) = channel_layout(x.shape());
    let mut xhat = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    let (g, b) = (gamma.data(), beta.data());
    for o in 0..outer {
        for c in 0..ch {
            let base = (o * ch + c) * inner;
            for i in base..base + inner {
                xhat[i] = (x.data()[i] - mean[c]) * inv_std[c];
                out[i] = xhat[i] * g[c] + b[c];
            }
        }
    }
    (Tensor::new(x.shape().to_vec(), out).expect("same shape"), xhat)
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::Dimension(format!("conv2d input {x:?} weight {w:?}")));
    }
    if x[1] != w[1] {
        return Err(Error::Dimension(format!(
            "conv2d input has {} channels, weight expects {}",
            x[1], w[1]
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if pad >= w[2] || pad >= w[3] {
        return Err(Error::Config(format!(
            "conv2d padding {pad} must be smaller than the kernel {}x{}",
            w[2], w[3]
        )));
    }
    if x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
        return Err(Error::Config("conv2d output would be empty".into()));
    }
    Ok(ConvGeom {
        batch: x[0],
        in_ch: x[1],
        height: x[2],
        width: x[3],
        out_ch: w[0],
        kh: w[2],
        kw: w[3],
        stride,
        pad,
    })
}
