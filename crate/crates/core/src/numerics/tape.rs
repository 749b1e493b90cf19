//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every forward op appends a node holding its output value and enough
//! context to push gradients back to its inputs. [`Tape::backward`] walks
//! the nodes in reverse and deposits parameter gradients into the
//! [`ParamStore`] the params were read from.
//!
//! Nodes that cannot reach a trainable param are marked as not requiring
//! gradient and are skipped entirely during the backward sweep.

use super::tensor::{axpy, dot, sigmoid};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for an op defined outside this module.
///
/// `inputs` are the input values in the order passed to [`Tape::custom`];
/// the result must have one entry per input (`None` when `needs[i]` is false).
pub trait CustomBackward {
    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ChannelMix {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    ScaleShift {
        x: Var,
        scale: f64,
    },
    ScalarMul {
        x: Var,
        s: Var,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    Concat0(Var, Var),
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// An input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Read a parameter onto the tape. Frozen params behave like constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// `y = x Wᵀ + b` for `x: [n, d_in]`, `W: [d_out, d_in]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(shape_err("linear", xv, wv));
        }
        let (n, d_in, d_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = vec![0.0; n * d_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != d_out {
                return Err(shape_err("linear bias", wv, bv));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for i in 0..n {
            let xi = &xd[i * d_in..(i + 1) * d_in];
            for o in 0..d_out {
                out[i * d_out + o] += dot(xi, &wd[o * d_in..(o + 1) * d_in]);
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Per-position linear map over the leading (channel) axis:
    /// `x: [c_in, ...]`, `W: [c_out, c_in]`, `b: [c_out]` → `[c_out, ...]`.
    pub fn channel_mix(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().is_empty() || wv.shape().len() != 2 || xv.shape()[0] != wv.shape()[1] {
            return Err(shape_err("channel_mix", xv, wv));
        }
        let (c_in, c_out) = (wv.shape()[1], wv.shape()[0]);
        let positions = xv.len() / c_in;
        let mut out = vec![0.0; c_out * positions];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != c_out {
                return Err(shape_err("channel_mix bias", wv, bv));
            }
            for (o, row) in out.chunks_mut(positions).enumerate() {
                row.fill(bv.data()[o]);
            }
        }
        channel_mix_forward(wv.data(), xv.data(), &mut out, c_in, c_out, positions);
        let mut shape = xv.shape().to_vec();
        shape[0] = c_out;
        let value = Tensor::new(shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::ChannelMix { x, w, b }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                xv.shape()
            )));
        }
        let value = softmax_along(xv, axis);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av, bv));
        }
        let mut value = av.clone();
        value.axpy(1.0, bv);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `y = scale·x + shift`.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(value, Op::ScaleShift { x, scale }, rg)
    }

    /// `y = s·x` with `s` a single-element tensor.
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        let Some(k) = sv.item() else {
            return Err(shape_err("scalar_mul", self.value(x), sv));
        };
        let value = self.value(x).map(|v| k * v);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ScalarMul { x, s }, rg))
    }

    /// Multiply channel `c` of `x: [C, ...]` by `s[c]` (`s` holds C elements).
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let c = sv.len();
        if xv.shape().first() != Some(&c) {
            return Err(shape_err("channel_scale", xv, sv));
        }
        let positions = xv.len() / c;
        let mut data = xv.data().to_vec();
        for (row, &k) in data.chunks_mut(positions).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ChannelScale { x, s }, rg))
    }

    /// Stack along axis 0; trailing dims must agree.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().is_empty() || av.shape()[1..] != bv.shape()[1..] {
            return Err(shape_err("concat0", av, bv));
        }
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat0(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.len().max(1) as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Record an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    ) -> Var {
        let rg = self.rg(&inputs);
        self.push(value, Op::Custom { inputs, rule }, rg)
    }

    /// Propagate `∂loss/∂·` to every trainable param read onto this tape,
    /// adding into the param grads held by `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, d_in, d_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                let gd = g.data();
                if self.needs(*x) {
                    let gx = grad_slot(grads, *x, xv);
                    for i in 0..n {
                        for o in 0..d_out {
                            let k = gd[i * d_out + o];
                            axpy(
                                k,
                                &wv.data()[o * d_in..(o + 1) * d_in],
                                &mut gx[i * d_in..(i + 1) * d_in],
                            );
                        }
                    }
                }
                if self.needs(*w) {
                    let gw = grad_slot(grads, *w, wv);
                    for i in 0..n {
                        for o in 0..d_out {
                            let k = gd[i * d_out + o];
                            axpy(
                                k,
                                &xv.data()[i * d_in..(i + 1) * d_in],
                                &mut gw[o * d_in..(o + 1) * d_in],
                            );
                        }
                    }
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let gb = grad_slot(grads, b, val(b));
                    for row in gd.chunks(d_out) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::ChannelMix { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (c_out, c_in) = (wv.shape()[0], wv.shape()[1]);
                let positions = xv.len() / c_in;
                let gd = g.data();
                if self.needs(*w) {
                    let gw = grad_slot(grads, *w, wv);
                    channel_mix_backward_weight(xv.data(), gd, gw, c_in, c_out, positions);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let gb = grad_slot(grads, b, val(b));
                    for o in 0..c_out {
                        gb[o] += gd[o * positions..(o + 1) * positions].iter().sum::<f64>();
                    }
                }
                if self.needs(*x) {
                    let gx = grad_slot(grads, *x, xv);
                    channel_mix_backward_input(wv.data(), gd, gx, c_in, c_out, positions);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = grad_slot(grads, *x, val(*x));
                for ((gi, &yi), &gy) in gx.iter_mut().zip(y).zip(g.data()) {
                    *gi += gy * yi * (1.0 - yi);
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let gx = grad_slot(grads, *x, val(*x));
                let (outer, len, inner) = axis_strides(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = 0.0;
                        for k in 0..len {
                            let j = base + k * inner;
                            s += gd[j] * yd[j];
                        }
                        for k in 0..len {
                            let j = base + k * inner;
                            gx[j] += yd[j] * (gd[j] - s);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        axpy(1.0, g.data(), grad_slot(grads, v, val(v)));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(v) {
                        let od = val(other).data();
                        let gv = grad_slot(grads, v, val(v));
                        for ((gi, &gy), &o) in gv.iter_mut().zip(g.data()).zip(od) {
                            *gi += gy * o;
                        }
                    }
                }
            }
            Op::ScaleShift { x, scale } => {
                axpy(*scale, g.data(), grad_slot(grads, *x, val(*x)));
            }
            Op::ScalarMul { x, s } => {
                let k = val(*s).data()[0];
                if self.needs(*x) {
                    axpy(k, g.data(), grad_slot(grads, *x, val(*x)));
                }
                if self.needs(*s) {
                    let d = dot(g.data(), val(*x).data());
                    grad_slot(grads, *s, val(*s))[0] += d;
                }
            }
            Op::ChannelScale { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                let c = sv.len();
                let positions = xv.len() / c;
                if self.needs(*s) {
                    let gs = grad_slot(grads, *s, sv);
                    for ch in 0..c {
                        let r = ch * positions..(ch + 1) * positions;
                        gs[ch] += dot(&g.data()[r.clone()], &xv.data()[r]);
                    }
                }
                if self.needs(*x) {
                    let gx = grad_slot(grads, *x, xv);
                    for ch in 0..c {
                        let r = ch * positions..(ch + 1) * positions;
                        axpy(sv.data()[ch], &g.data()[r.clone()], &mut gx[r]);
                    }
                }
            }
            Op::Concat0(a, b) => {
                let split = val(*a).len();
                if self.needs(*a) {
                    axpy(1.0, &g.data()[..split], grad_slot(grads, *a, val(*a)));
                }
                if self.needs(*b) {
                    axpy(1.0, &g.data()[split..], grad_slot(grads, *b, val(*b)));
                }
            }
            Op::Sum(x) => {
                let k = g.data()[0];
                grad_slot(grads, *x, val(*x))
                    .iter_mut()
                    .for_each(|v| *v += k);
            }
            Op::Mean(x) => {
                let n = val(*x).len().max(1) as f64;
                let k = g.data()[0] / n;
                grad_slot(grads, *x, val(*x))
                    .iter_mut()
                    .for_each(|v| *v += k);
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let out = rule.backward(g, &vals, &needs);
                for ((v, gi), need) in inputs.iter().zip(out).zip(needs) {
                    if let (Some(gi), true) = (gi, need) {
                        axpy(1.0, gi.data(), grad_slot(grads, *v, val(*v)));
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(like.shape()))
        .data_mut()
}

/// `(outer, len, inner)` strides for reducing over `axis` of a row-major shape.
pub(crate) fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_along(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_strides(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..len {
                m = m.max(xd[base + k * inner]);
            }
            let mut s = 0.0;
            for k in 0..len {
                let e = (xd[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                s += e;
            }
            for k in 0..len {
                out[base + k * inner] /= s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

// Position blocks keep a slab of every input channel resident in cache
// while each output row is accumulated.
const BLOCK: usize = 1024;

fn channel_mix_forward(w: &[f64], x: &[f64], out: &mut [f64], c_in: usize, c_out: usize, n: usize) {
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        for o in 0..c_out {
            let row = &mut out[o * n + start..o * n + end];
            for i in 0..c_in {
                axpy(w[o * c_in + i], &x[i * n + start..i * n + end], row);
            }
        }
        start = end;
    }
}

fn channel_mix_backward_weight(
    x: &[f64],
    g: &[f64],
    gw: &mut [f64],
    c_in: usize,
    c_out: usize,
    n: usize,
) {
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        for o in 0..c_out {
            let go = &g[o * n + start..o * n + end];
            for i in 0..c_in {
                gw[o * c_in + i] += dot(go, &x[i * n + start..i * n + end]);
            }
        }
        start = end;
    }
}

fn channel_mix_backward_input(
    w: &[f64],
    g: &[f64],
    gx: &mut [f64],
    c_in: usize,
    c_out: usize,
    n: usize,
) {
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        for i in 0..c_in {
            let row = &mut gx[i * n + start..i * n + end];
            for o in 0..c_out {
                axpy(w[o * c_in + i], &g[o * n + start..o * n + end], row);
            }
        }
        start = end;
    }
}
