//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward operation together with its output
//! value. [`Tape::backward`] replays the adjoint rules in reverse recording
//! order and returns a [`GradientMap`]. The tape is never mutated by
//! `backward`, so replaying it twice gives bitwise-identical gradients.

mod finite_diff;
pub mod kernels;

pub use finite_diff::{central_difference, finite_diff_gradient, relative_error};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use kernels::ConvGeom;

/// Floor on `sqrt(x)` used by the square-root adjoint.
pub const SQRT_ADJOINT_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    Abs,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Offset,
    Sqrt,
    Square,
    Sum,
    Mean,
    Concat,
    Narrow,
    Tile,
    Filter,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::Abs,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::Offset,
        OpKind::Sqrt,
        OpKind::Square,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Tile,
        OpKind::Filter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::Offset => "offset",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat_channels",
            OpKind::Narrow => "narrow",
            OpKind::Tile => "tile_channels",
            OpKind::Filter => "gaussian_filter",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, axis: usize, start: usize },
    Tile { x: Var, times: usize },
    Filter { x: Var, kernel: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Abs(_) => OpKind::Abs,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::Offset(_) => OpKind::Offset,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Square(_) => OpKind::Square,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Concat(_) => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Tile { .. } => OpKind::Tile,
            Op::Filter { .. } => OpKind::Filter,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recording of a forward computation. Single owner; build one per
/// forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    labels: Vec<(Var, &'static str)>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            labels: Vec::new(),
            fault: None,
        }
    }

    /// Test fixture: every adjoint of `kind` recorded on this tape is scaled
    /// by 1.5 during `backward`. Used as a negative control for gradient
    /// checks.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Attach a static label to a node, for instrumentation.
    pub fn label(&mut self, v: Var, label: &'static str) {
        self.labels.push((v, label));
    }

    pub fn count_label(&self, label: &str) -> usize {
        self.labels.iter().filter(|(_, l)| *l == label).count()
    }

    /// Sign pattern of every input to a non-smooth op (relu, abs, sqrt).
    /// Two evaluations of the same graph with equal signatures lie on the
    /// same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::Abs(x) | Op::Sqrt(x) = node.op {
                sig.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        sig
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Record an input, parameter or constant.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels but weights expect {wcin}"
            )));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape(format!(
                "conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}"
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} does not match {cout} output channels",
                self.shape(bias)
            )));
        }
        let g = ConvGeom {
            batch: b,
            cin,
            cout,
            height: h,
            width: w,
            kernel: kh,
        };
        let out = kernels::conv2d_forward(
            g,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![b, cout, h, w], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            value,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu(x), value)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(Op::Abs(x), value)
    }

    fn zip(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, what)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain("div: zero in denominator".into()));
        }
        let value = self.zip(a, b, "div", |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), value))
    }

    /// Scalar times tensor.
    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(Op::Scale(x, s), value)
    }

    /// Scalar plus tensor.
    pub fn offset(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(Op::Offset(x), value)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v < T::zero()) {
            return Err(Error::Domain(format!("sqrt of negative value {v}")));
        }
        let value = self.value(x).map(|v| v.sqrt());
        Ok(self.push(Op::Sqrt(x), value))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_all());
        self.push(Op::Sum(x), value)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum_all() / T::of(t.len() as f64));
        self.push(Op::Mean(x), value)
    }

    /// Concatenate rank-4 tensors along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels: no parts"))?;
        let (b, _, h, w) = self.value(*first).dims4()?;
        let mut total = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = self.value(p).dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::shape(format!(
                    "concat_channels: part {:?} does not match batch/spatial dims {:?}",
                    self.shape(p),
                    (b, h, w)
                )));
            }
            total += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[bi * c * hw..][..c * hw]);
            }
        }
        let value = Tensor::new(vec![b, total, h, w], data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow: range {start}..{} on axis {axis} out of bounds for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * dim + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::Narrow { x, axis, start }, value))
    }

    /// Repeat a rank-4 tensor `times` times along the channel axis.
    pub fn tile_channels(&mut self, x: Var, times: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if times == 0 {
            return Err(Error::shape("tile_channels: times must be positive"));
        }
        let src = self.value(x).data();
        let block = c * h * w;
        let mut data = Vec::with_capacity(b * times * block);
        for bi in 0..b {
            for _ in 0..times {
                data.extend_from_slice(&src[bi * block..][..block]);
            }
        }
        let value = Tensor::new(vec![b, c * times, h, w], data)?;
        Ok(self.push(Op::Tile { x, times }, value))
    }

    /// Separable valid-region filtering of every `[H, W]` plane of a rank-4
    /// tensor with the given 1-D kernel.
    pub fn filter_valid(&mut self, x: Var, kernel: &[T]) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let k = kernel.len();
        if k == 0 || h < k || w < k {
            return Err(Error::contract(format!(
                "filter: {h}x{w} planes are smaller than the {k}-tap window"
            )));
        }
        let out = kernels::separable_filter_valid(self.value(x).data(), b * c, h, w, kernel);
        let value = Tensor::new(vec![b, c, h + 1 - k, w + 1 - k], out)?;
        Ok(self.push(
            Op::Filter {
                x,
                kernel: kernel.to_vec(),
            },
            value,
        ))
    }

    /// Reverse-mode gradients of the rank-0 node `loss` with respect to every
    /// node recorded before it.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<T>> {
        if self.value(loss).rank() != 0 {
            return Err(Error::contract(format!(
                "backward: loss must be rank-0, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_mut() else {
                continue;
            };
            let node = &self.nodes[id];
            if self.fault == Some(node.op.kind()) {
                let s = T::of(1.5);
                g.iter_mut().for_each(|v| *v = *v * s);
            }
            self.adjoint(node, g, lower)?;
        }
        let values = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d)))
            .map(|g| g.transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(GradientMap { grads: values })
    }

    fn adjoint(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let (b, cin, h, w) = self.value(*input).dims4()?;
                let (cout, _, k, _) = self.value(*weight).dims4()?;
                let geom = ConvGeom {
                    batch: b,
                    cin,
                    cout,
                    height: h,
                    width: w,
                    kernel: k,
                };
                let gi = kernels::conv2d_backward_input(geom, g, val(*weight));
                let (gw, gb) = kernels::conv2d_backward_params(geom, val(*input), g);
                accumulate(grads, *input, gi.len(), |i| gi[i]);
                accumulate(grads, *weight, gw.len(), |i| gw[i]);
                accumulate(grads, *bias, gb.len(), |i| gb[i]);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                accumulate(grads, *x, g.len(), |i| {
                    if xv[i] > T::zero() {
                        g[i]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                accumulate(grads, *x, g.len(), |i| {
                    if xv[i] > T::zero() {
                        g[i]
                    } else if xv[i] < T::zero() {
                        -g[i]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.len(), |i| g[i]);
                accumulate(grads, *b, g.len(), |i| g[i]);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.len(), |i| g[i]);
                accumulate(grads, *b, g.len(), |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, *a, g.len(), |i| g[i] * bv[i]);
                accumulate(grads, *b, g.len(), |i| g[i] * av[i]);
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                let out = node.value.data();
                accumulate(grads, *a, g.len(), |i| g[i] / bv[i]);
                accumulate(grads, *b, g.len(), |i| -g[i] * out[i] / bv[i]);
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.len(), |i| g[i] * *s),
            Op::Offset(x) => accumulate(grads, *x, g.len(), |i| g[i]),
            Op::Sqrt(x) => {
                let out = node.value.data();
                let eps = T::of(SQRT_ADJOINT_EPS);
                let two = T::of(2.0);
                accumulate(grads, *x, g.len(), |i| g[i] / (two * out[i].max(eps)));
            }
            Op::Square(x) => {
                let xv = val(*x);
                let two = T::of(2.0);
                accumulate(grads, *x, g.len(), |i| two * xv[i] * g[i]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, n, |_| g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gm = g[0] / T::of(n as f64);
                accumulate(grads, *x, n, |_| gm);
            }
            Op::Concat(parts) => {
                let (b, total, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    accumulate(grads, p, b * c * hw, |i| {
                        let (bi, rest) = (i / (c * hw), i % (c * hw));
                        g[bi * total * hw + offset * hw + rest]
                    });
                    offset += c;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let dim = in_shape[*axis];
                let len = node.value.shape()[*axis];
                let inner: usize = in_shape[axis + 1..].iter().product();
                let n = self.value(*x).len();
                accumulate(grads, *x, n, |i| {
                    let o = i / (dim * inner);
                    let a = (i / inner) % dim;
                    if a >= *start && a < start + len {
                        g[(o * len + (a - start)) * inner + i % inner]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Tile { x, times } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let block = c * h * w;
                accumulate(grads, *x, b * block, |i| {
                    let (bi, rest) = (i / block, i % block);
                    (0..*times).fold(T::zero(), |acc, t| acc + g[(bi * times + t) * block + rest])
                });
            }
            Op::Filter { x, kernel } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let gi = kernels::separable_filter_valid_backward(g, b * c, h, w, kernel);
                accumulate(grads, *x, gi.len(), |i| gi[i]);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(
    grads: &mut [Option<Vec<T>>],
    target: Var,
    len: usize,
    f: impl Fn(usize) -> T,
) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (i, v) in existing.iter_mut().enumerate() {
                *v = *v + f(i);
            }
        }
        slot @ None => *slot = Some((0..len).map(f).collect()),
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct GradientMap<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradientMap<T> {
    /// Gradient of `v`, or `None` when `v` does not influence the loss.
    pub fn try_get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`; nodes off every path to the loss get exact zeros
    /// shaped like the node's value on `tape`.
    pub fn get(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.try_get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
    }
}

#[cfg(test)]
mod tests;
