//! A small reverse-mode automatic differentiation tape over `f64` arrays.
//!
//! Values are handles into an append-only graph owned by a [`Tape`]. Every
//! operation evaluates eagerly and records enough structure to build its
//! vector-Jacobian product *out of tape operations*, so the result of
//! [`Tape::backward`] is itself differentiable. That is what lets the
//! reconstruction loss differentiate through a gradient norm (double
//! backpropagation) with the same machinery as any first-order term.
//!
//! A tape is intended to live for one optimization step: create it, build the
//! loss, pull gradients, update parameters held outside the tape, drop it.

pub mod conv;
pub mod kernels;

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Tanh,
    LeakyRelu { slope: f64 },
    MaxScalar { c: f64 },
    Maximum,
    Scale { c: f64 },
    AddScalar,
    Matmul,
    Bmm,
    Permute { axes: Vec<usize> },
    Reshape,
    BroadcastTo,
    SumTo,
    Sum { axes: Vec<usize>, keep: bool },
    Slice { axis: usize, start: usize, len: usize },
    PadZero { axis: usize, before: usize },
    Concat { axis: usize },
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    Conv2dWgrad { stride: usize, pad: usize },
}

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph for one step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Cheap copyable handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: ArrayD<f64>, parents: Vec<usize>, op: Op, requires_grad: bool) -> Value<'_> {
        debug_assert!(value.iter().all(|v| !v.is_nan()) || true, "nan check is caller's job");
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            op,
            requires_grad,
        });
        Value { tape: self, id }
    }

    /// A leaf that participates in gradient computation.
    pub fn variable(&self, value: ArrayD<f64>) -> Value<'_> {
        self.push(value, vec![], Op::Leaf, true)
    }

    /// A leaf treated as a constant: no gradient flows into it.
    pub fn constant(&self, value: ArrayD<f64>) -> Value<'_> {
        self.push(value, vec![], Op::Leaf, false)
    }

    pub fn scalar_const(&self, c: f64) -> Value<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), c))
    }

    fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&ArrayD<f64>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let refs: Vec<&ArrayD<f64>> = ids.iter().map(|&i| &nodes[i].value).collect();
        f(&refs)
    }

    fn requires_grad_any(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Concatenate along `axis`.
    pub fn concat<'t>(&'t self, parts: &[Value<'t>], axis: usize) -> Value<'t> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let out = self.with_values(&ids, |vals| kernels::concat(vals, axis));
        let rg = self.requires_grad_any(&ids);
        self.push(out, ids, Op::Concat { axis }, rg)
    }

    /// Reverse-mode sweep from scalar `loss` to each of `wrt`.
    ///
    /// Gradients are recorded on the tape as ordinary nodes, so a scalar
    /// built from them can be swept again for second-order derivatives.
    /// `None` means the loss does not depend on that input.
    pub fn backward<'t>(&'t self, loss: Value<'t>, wrt: &[Value<'t>]) -> Vec<Option<Value<'t>>> {
        assert!(
            loss.numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        );
        let top = loss.id;

        // A node deserves gradient work only if it both requires grad and
        // can reach one of the requested targets through parent edges; this
        // keeps nested sweeps from descending into unrelated subgraphs.
        let mut needed = vec![false; top + 1];
        for v in wrt {
            if v.id <= top {
                needed[v.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..=top {
                if !needed[i] {
                    needed[i] = nodes[i].parents.iter().any(|&p| needed[p]);
                }
            }
        }

        let mut grads: Vec<Option<Value<'t>>> = vec![None; top + 1];
        let seed_shape = loss.shape();
        grads[top] = Some(self.constant(ArrayD::from_elem(IxDyn(&seed_shape), 1.0)));

        for id in (0..=top).rev() {
            let Some(gout) = grads[id] else { continue };
            let (op, parents) = {
                let nodes = self.nodes.borrow();
                if nodes[id].parents.is_empty() || !nodes[id].requires_grad {
                    continue;
                }
                (nodes[id].op.clone(), nodes[id].parents.clone())
            };
            let want = |pid: usize| {
                needed[pid] && self.nodes.borrow()[pid].requires_grad
            };
            let contribs = self.vjp(&op, &parents, id, gout, &want);
            for (pid, contrib) in contribs {
                grads[pid] = Some(match grads[pid] {
                    None => contrib,
                    Some(prev) => prev.add(contrib),
                });
            }
        }

        wrt.iter()
            .map(|v| if v.id <= top { grads[v.id] } else { None })
            .collect()
    }

    /// Per-parent gradient contributions for one node, built from tape ops.
    /// Contributions are only constructed for parents accepted by `want`.
    fn vjp<'t>(
        &'t self,
        op: &Op,
        parents: &[usize],
        out_id: usize,
        g: Value<'t>,
        want: &dyn Fn(usize) -> bool,
    ) -> Vec<(usize, Value<'t>)> {
        let pv = |i: usize| Value { tape: self, id: parents[i] };
        let out = Value { tape: self, id: out_id };
        let w0 = want(parents[0]);
        let w1 = parents.len() > 1 && want(parents[1]);
        let mut res: Vec<(usize, Value<'t>)> = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add => {
                if w0 {
                    res.push((parents[0], g.reduce_like(&pv(0).shape())));
                }
                if w1 {
                    res.push((parents[1], g.reduce_like(&pv(1).shape())));
                }
            }
            Op::Sub => {
                if w0 {
                    res.push((parents[0], g.reduce_like(&pv(0).shape())));
                }
                if w1 {
                    res.push((parents[1], g.neg().reduce_like(&pv(1).shape())));
                }
            }
            Op::Mul => {
                if w0 {
                    res.push((parents[0], g.mul(pv(1)).reduce_like(&pv(0).shape())));
                }
                if w1 {
                    res.push((parents[1], g.mul(pv(0)).reduce_like(&pv(1).shape())));
                }
            }
            Op::Div => {
                // d(a/b)/da = 1/b, d(a/b)/db = -out/b
                if w0 {
                    res.push((parents[0], g.div(pv(1)).reduce_like(&pv(0).shape())));
                }
                if w1 {
                    res.push((
                        parents[1],
                        g.mul(out).div(pv(1)).neg().reduce_like(&pv(1).shape()),
                    ));
                }
            }
            Op::Neg => {
                if w0 {
                    res.push((parents[0], g.neg()));
                }
            }
            Op::Exp => {
                if w0 {
                    res.push((parents[0], g.mul(out)));
                }
            }
            Op::Ln => {
                if w0 {
                    res.push((parents[0], g.div(pv(0))));
                }
            }
            Op::Sqrt => {
                if w0 {
                    res.push((parents[0], g.scale(0.5).div(out)));
                }
            }
            Op::Tanh => {
                if w0 {
                    let one_minus = out.mul(out).neg().add_scalar(1.0);
                    res.push((parents[0], g.mul(one_minus)));
                }
            }
            Op::LeakyRelu { slope } => {
                if w0 {
                    let slope = *slope;
                    let mask = self.with_values(&[parents[0]], |v| {
                        kernels::unary(v[0], |x| if x > 0.0 { 1.0 } else { slope })
                    });
                    res.push((parents[0], g.mul(self.constant(mask))));
                }
            }
            Op::MaxScalar { c } => {
                if w0 {
                    let c = *c;
                    let mask = self.with_values(&[parents[0]], |v| {
                        kernels::unary(v[0], |x| if x >= c { 1.0 } else { 0.0 })
                    });
                    res.push((parents[0], g.mul(self.constant(mask))));
                }
            }
            Op::Maximum => {
                let mask = self.with_values(&[parents[0], parents[1]], |v| {
                    kernels::binary(v[0], v[1], |a, b| if a >= b { 1.0 } else { 0.0 })
                });
                if w0 {
                    res.push((
                        parents[0],
                        g.mul(self.constant(mask.clone())).reduce_like(&pv(0).shape()),
                    ));
                }
                if w1 {
                    let inv = kernels::unary(&mask, |x| 1.0 - x);
                    res.push((
                        parents[1],
                        g.mul(self.constant(inv)).reduce_like(&pv(1).shape()),
                    ));
                }
            }
            Op::Scale { c } => {
                if w0 {
                    res.push((parents[0], g.scale(*c)));
                }
            }
            Op::AddScalar => {
                if w0 {
                    res.push((parents[0], g));
                }
            }
            Op::Matmul => {
                if w0 {
                    res.push((parents[0], g.matmul(pv(1).t2())));
                }
                if w1 {
                    res.push((parents[1], pv(0).t2().matmul(g)));
                }
            }
            Op::Bmm => {
                if w0 {
                    res.push((parents[0], g.bmm(pv(1).permute(&[0, 2, 1]))));
                }
                if w1 {
                    res.push((parents[1], pv(0).permute(&[0, 2, 1]).bmm(g)));
                }
            }
            Op::Permute { axes } => {
                if w0 {
                    res.push((parents[0], g.permute(&kernels::inverse_permutation(axes))));
                }
            }
            Op::Reshape => {
                if w0 {
                    res.push((parents[0], g.reshape(&pv(0).shape())));
                }
            }
            Op::BroadcastTo => {
                if w0 {
                    res.push((parents[0], g.sum_to(&pv(0).shape())));
                }
            }
            Op::SumTo => {
                if w0 {
                    res.push((parents[0], g.broadcast_to(&pv(0).shape())));
                }
            }
            Op::Sum { axes, keep } => {
                if w0 {
                    let in_shape = pv(0).shape();
                    let gk = if *keep {
                        g
                    } else {
                        g.reshape(&kernels::keepdim_shape(&in_shape, axes))
                    };
                    res.push((parents[0], gk.broadcast_to(&in_shape)));
                }
            }
            Op::Slice { axis, start, len } => {
                if w0 {
                    let in_len = pv(0).shape()[*axis];
                    res.push((parents[0], g.pad_zero(*axis, *start, in_len - start - len)));
                }
            }
            Op::PadZero { axis, before } => {
                if w0 {
                    let in_len = pv(0).shape()[*axis];
                    res.push((parents[0], g.slice_axis(*axis, *before, in_len)));
                }
            }
            Op::Concat { axis } => {
                let mut offset = 0usize;
                for (i, &pid) in parents.iter().enumerate() {
                    let len = pv(i).shape()[*axis];
                    if want(pid) {
                        res.push((pid, g.slice_axis(*axis, offset, len)));
                    }
                    offset += len;
                }
            }
            Op::Conv2d { stride, pad } => {
                let x = pv(0);
                let w = pv(1);
                if w0 {
                    let xs = x.shape();
                    res.push((parents[0], g.conv_t2d(w, *stride, *pad, (xs[2], xs[3]))));
                }
                if w1 {
                    let ws = w.shape();
                    res.push((parents[1], x.conv2d_wgrad(g, *stride, *pad, ws[2], ws[3])));
                }
            }
            Op::ConvT2d { stride, pad } => {
                let x = pv(0);
                let w = pv(1);
                if w0 {
                    res.push((parents[0], g.conv2d(w, *stride, *pad)));
                }
                if w1 {
                    let ws = w.shape();
                    res.push((parents[1], g.conv2d_wgrad(x, *stride, *pad, ws[2], ws[3])));
                }
            }
            Op::Conv2dWgrad { stride, pad } => {
                let x = pv(0);
                let dy = pv(1);
                if w0 {
                    let xs = x.shape();
                    res.push((parents[0], dy.conv_t2d(g, *stride, *pad, (xs[2], xs[3]))));
                }
                if w1 {
                    res.push((parents[1], x.conv2d(g, *stride, *pad)));
                }
            }
        }
        res
    }
}

impl<'t> Value<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Clone the underlying array out of the tape.
    pub fn array(&self) -> ArrayD<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Extract a scalar; panics unless the node holds exactly one element.
    pub fn scalar(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "scalar() on shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Value<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "values from different tapes"
        );
    }

    fn binary_op(self, other: Value<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Value<'t> {
        self.same_tape(&other);
        let out = self
            .tape
            .with_values(&[self.id, other.id], |v| kernels::binary(v[0], v[1], f));
        let rg = self.tape.requires_grad_any(&[self.id, other.id]);
        self.tape.push(out, vec![self.id, other.id], op, rg)
    }

    fn unary_op(self, op: Op, f: impl Fn(f64) -> f64) -> Value<'t> {
        let out = self.tape.with_values(&[self.id], |v| kernels::unary(v[0], f));
        let rg = self.requires_grad();
        self.tape.push(out, vec![self.id], op, rg)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, o: Value<'t>) -> Value<'t> {
        self.binary_op(o, Op::Add, |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, o: Value<'t>) -> Value<'t> {
        self.binary_op(o, Op::Sub, |a, b| a - b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, o: Value<'t>) -> Value<'t> {
        self.binary_op(o, Op::Mul, |a, b| a * b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(self, o: Value<'t>) -> Value<'t> {
        self.binary_op(o, Op::Div, |a, b| a / b)
    }

    pub fn maximum(self, o: Value<'t>) -> Value<'t> {
        self.binary_op(o, Op::Maximum, f64::max)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Value<'t> {
        self.unary_op(Op::Neg, |x| -x)
    }

    pub fn exp(self) -> Value<'t> {
        self.unary_op(Op::Exp, f64::exp)
    }

    pub fn ln(self) -> Value<'t> {
        self.unary_op(Op::Ln, f64::ln)
    }

    pub fn sqrt(self) -> Value<'t> {
        self.unary_op(Op::Sqrt, f64::sqrt)
    }

    pub fn tanh(self) -> Value<'t> {
        self.unary_op(Op::Tanh, f64::tanh)
    }

    pub fn leaky_relu(self, slope: f64) -> Value<'t> {
        self.unary_op(Op::LeakyRelu { slope }, move |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn relu(self) -> Value<'t> {
        self.leaky_relu(0.0)
    }

    /// Elementwise `max(x, c)`; gradient passes where `x >= c`.
    pub fn max_scalar(self, c: f64) -> Value<'t> {
        self.unary_op(Op::MaxScalar { c }, move |x| x.max(c))
    }

    pub fn scale(self, c: f64) -> Value<'t> {
        self.unary_op(Op::Scale { c }, move |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Value<'t> {
        self.unary_op(Op::AddScalar, move |x| x + c)
    }

    pub fn square(self) -> Value<'t> {
        self.mul(self)
    }

    pub fn matmul(self, o: Value<'t>) -> Value<'t> {
        self.same_tape(&o);
        let out = self
            .tape
            .with_values(&[self.id, o.id], |v| kernels::matmul2(v[0], v[1]));
        let rg = self.tape.requires_grad_any(&[self.id, o.id]);
        self.tape.push(out, vec![self.id, o.id], Op::Matmul, rg)
    }

    pub fn bmm(self, o: Value<'t>) -> Value<'t> {
        self.same_tape(&o);
        let out = self
            .tape
            .with_values(&[self.id, o.id], |v| kernels::bmm(v[0], v[1]));
        let rg = self.tape.requires_grad_any(&[self.id, o.id]);
        self.tape.push(out, vec![self.id, o.id], Op::Bmm, rg)
    }

    /// 2-d transpose.
    pub fn t2(self) -> Value<'t> {
        self.permute(&[1, 0])
    }

    pub fn permute(self, axes: &[usize]) -> Value<'t> {
        let out = self.tape.with_values(&[self.id], |v| kernels::permute(v[0], axes));
        let rg = self.requires_grad();
        self.tape
            .push(out, vec![self.id], Op::Permute { axes: axes.to_vec() }, rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Value<'t> {
        let out = self.tape.with_values(&[self.id], |v| kernels::reshape(v[0], shape));
        let rg = self.requires_grad();
        self.tape.push(out, vec![self.id], Op::Reshape, rg)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Value<'t> {
        if self.shape() == shape {
            return self;
        }
        let out = self
            .tape
            .with_values(&[self.id], |v| kernels::broadcast_to(v[0], shape));
        let rg = self.requires_grad();
        self.tape.push(out, vec![self.id], Op::BroadcastTo, rg)
    }

    pub fn sum_to(self, shape: &[usize]) -> Value<'t> {
        if self.shape() == shape {
            return self;
        }
        let out = self.tape.with_values(&[self.id], |v| kernels::sum_to(v[0], shape));
        let rg = self.requires_grad();
        self.tape.push(out, vec![self.id], Op::SumTo, rg)
    }

    fn reduce_like(self, shape: &[usize]) -> Value<'t> {
        self.sum_to(shape)
    }

    pub fn sum_axes(self, axes: &[usize], keep: bool) -> Value<'t> {
        let out = self
            .tape
            .with_values(&[self.id], |v| kernels::sum_axes(v[0], axes, keep));
        let rg = self.requires_grad();
        self.tape.push(
            out,
            vec![self.id],
            Op::Sum {
                axes: axes.to_vec(),
                keep,
            },
            rg,
        )
    }

    pub fn sum_all(self) -> Value<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        if axes.is_empty() {
            return self;
        }
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(self) -> Value<'t> {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn mean_axes(self, axes: &[usize], keep: bool) -> Value<'t> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes, keep).scale(1.0 / n as f64)
    }

    pub fn slice_axis(self, axis: usize, start: usize, len: usize) -> Value<'t> {
        let out = self
            .tape
            .with_values(&[self.id], |v| kernels::slice_axis(v[0], axis, start, len));
        let rg = self.requires_grad();
        self.tape
            .push(out, vec![self.id], Op::Slice { axis, start, len }, rg)
    }

    pub fn pad_zero(self, axis: usize, before: usize, after: usize) -> Value<'t> {
        if before == 0 && after == 0 {
            return self;
        }
        let out = self
            .tape
            .with_values(&[self.id], |v| kernels::pad_zero_axis(v[0], axis, before, after));
        let rg = self.requires_grad();
        self.tape
            .push(out, vec![self.id], Op::PadZero { axis, before }, rg)
    }

    pub fn conv2d(self, w: Value<'t>, stride: usize, pad: usize) -> Value<'t> {
        self.same_tape(&w);
        let out = self
            .tape
            .with_values(&[self.id, w.id], |v| conv::conv2d(v[0], v[1], stride, pad));
        let rg = self.tape.requires_grad_any(&[self.id, w.id]);
        self.tape
            .push(out, vec![self.id, w.id], Op::Conv2d { stride, pad }, rg)
    }

    pub fn conv_t2d(self, w: Value<'t>, stride: usize, pad: usize, out_hw: (usize, usize)) -> Value<'t> {
        self.same_tape(&w);
        let out = self.tape.with_values(&[self.id, w.id], |v| {
            conv::conv_t2d(v[0], v[1], stride, pad, out_hw)
        });
        let rg = self.tape.requires_grad_any(&[self.id, w.id]);
        self.tape
            .push(out, vec![self.id, w.id], Op::ConvT2d { stride, pad }, rg)
    }

    fn conv2d_wgrad(self, dy: Value<'t>, stride: usize, pad: usize, kh: usize, kw: usize) -> Value<'t> {
        self.same_tape(&dy);
        let out = self.tape.with_values(&[self.id, dy.id], |v| {
            conv::conv2d_wgrad(v[0], v[1], stride, pad, kh, kw)
        });
        let rg = self.tape.requires_grad_any(&[self.id, dy.id]);
        self.tape
            .push(out, vec![self.id, dy.id], Op::Conv2dWgrad { stride, pad }, rg)
    }

    /// True if every element is finite.
    pub fn is_finite(&self) -> bool {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].value.iter().all(|v| v.is_finite())
    }
}

/// Softmax along the last axis, shift-stabilized.
///
/// The shift is a stop-gradient row max: softmax is exactly invariant to it,
/// so the recorded graph stays mathematically identical to the unshifted
/// form while avoiding overflow.
pub fn softmax<'t>(tape: &'t Tape, x: Value<'t>) -> Value<'t> {
    let shifted = x.sub(row_max_const(tape, x));
    let e = shifted.exp();
    let last = x.shape().len() - 1;
    let denom = e.sum_axes(&[last], true);
    e.div(denom)
}

/// Log-softmax along the last axis, shift-stabilized.
pub fn log_softmax<'t>(tape: &'t Tape, x: Value<'t>) -> Value<'t> {
    let shifted = x.sub(row_max_const(tape, x));
    let last = x.shape().len() - 1;
    let lse = shifted.exp().sum_axes(&[last], true).ln();
    shifted.sub(lse)
}

fn row_max_const<'t>(tape: &'t Tape, x: Value<'t>) -> Value<'t> {
    let arr = x.array();
    let last = arr.ndim() - 1;
    let m = arr.map_axis(ndarray::Axis(last), |row| {
        row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    });
    tape.constant(m.insert_axis(ndarray::Axis(last)))
}

/// L2 norm of a set of values as one scalar: sqrt(sum of squares + eps).
pub fn global_norm<'t>(tape: &'t Tape, parts: &[Value<'t>], eps: f64) -> Value<'t> {
    assert!(!parts.is_empty(), "global_norm of nothing");
    let mut acc = tape.scalar_const(0.0);
    for p in parts {
        acc = acc.add(p.square().sum_all());
    }
    acc.add_scalar(eps).sqrt()
}

impl<'t> std::ops::Add for Value<'t> {
    type Output = Value<'t>;
    fn add(self, rhs: Self) -> Self::Output {
        Value::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Value<'t> {
    type Output = Value<'t>;
    fn sub(self, rhs: Self) -> Self::Output {
        Value::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Value<'t> {
    type Output = Value<'t>;
    fn mul(self, rhs: Self) -> Self::Output {
        Value::mul(self, rhs)
    }
}

impl<'t> std::ops::Div for Value<'t> {
    type Output = Value<'t>;
    fn div(self, rhs: Self) -> Self::Output {
        Value::div(self, rhs)
    }
}

impl<'t> std::ops::Neg for Value<'t> {
    type Output = Value<'t>;
    fn neg(self) -> Self::Output {
        Value::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Central finite differences against the tape gradient at random probes.
    fn fd_check(
        shape: &[usize],
        seed: u64,
        probes: usize,
        build: impl for<'a> Fn(&'a Tape, Value<'a>) -> Value<'a>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_array(shape, &mut rng);
        let tape = Tape::new();
        let x = tape.variable(x0.clone());
        let loss = build(&tape, x);
        let grad = tape.backward(loss, &[x])[0].expect("loss must depend on x").array();

        let n = x0.len();
        let eps = 1e-5;
        for _ in 0..probes {
            let flat = rng.random_range(0..n);
            let idx: Vec<usize> = {
                let mut rem = flat;
                let mut idx = vec![0; shape.len()];
                for (d, &s) in shape.iter().enumerate().rev() {
                    idx[d] = rem % s;
                    rem /= s;
                }
                idx
            };
            let eval = |v: f64| -> f64 {
                let mut xp = x0.clone();
                xp[IxDyn(&idx)] = v;
                let t = Tape::new();
                let xv = t.variable(xp);
                build(&t, xv).scalar()
            };
            let base = x0[IxDyn(&idx)];
            let fd = (eval(base + eps) - eval(base - eps)) / (2.0 * eps);
            let ad = grad[IxDyn(&idx)];
            let denom = fd.abs().max(ad.abs()).max(1e-8);
            assert!(
                (fd - ad).abs() / denom < 1e-3,
                "fd {} vs ad {} at {:?}",
                fd,
                ad,
                idx
            );
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        fd_check(&[3, 4], 1, 6, |_t, x| {
            x.scale(0.7)
                .add_scalar(0.1)
                .exp()
                .ln()
                .mul(x)
                .tanh()
                .sum_all()
        });
        fd_check(&[5], 2, 5, |_t, x| x.square().add_scalar(1.0).sqrt().sum_all());
        fd_check(&[4, 3], 3, 6, |_t, x| x.leaky_relu(0.2).sum_all());
        fd_check(&[6], 4, 5, |_t, x| x.max_scalar(0.1).ln().sum_all());
    }

    #[test]
    fn grad_broadcast_binary() {
        fd_check(&[3, 4], 5, 6, |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let b = t.constant(rand_array(&[4], &mut rng));
            x.add(b).mul(x).sum_all()
        });
        fd_check(&[2, 3, 4], 6, 6, |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(98);
            let b = t.constant(rand_array(&[1, 3, 1], &mut rng));
            x.mul(b).div(x.square().add_scalar(1.0)).sum_all()
        });
    }

    #[test]
    fn grad_matmul_and_bmm() {
        fd_check(&[3, 4], 7, 6, |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(97);
            let w = t.constant(rand_array(&[4, 2], &mut rng));
            x.matmul(w).square().sum_all()
        });
        fd_check(&[2, 3, 4], 8, 6, |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(96);
            let w = t.constant(rand_array(&[2, 4, 3], &mut rng));
            x.bmm(w).tanh().sum_all()
        });
    }

    #[test]
    fn grad_shape_ops() {
        fd_check(&[2, 6], 9, 6, |_t, x| {
            x.reshape(&[3, 4]).permute(&[1, 0]).slice_axis(0, 1, 2).sum_all()
        });
        fd_check(&[2, 3], 10, 5, |_t, x| {
            x.pad_zero(1, 1, 2).square().sum_all()
        });
        fd_check(&[4, 3], 11, 6, |_t, x| {
            x.sum_axes(&[0], true).broadcast_to(&[4, 3]).mul(x).sum_all()
        });
        fd_check(&[2, 4], 19, 5, |t, x| {
            let a = x.slice_axis(1, 0, 2);
            let b = x.slice_axis(1, 2, 2);
            t.concat(&[b, a], 1).square().sum_all()
        });
    }

    #[test]
    fn grad_softmax_losses() {
        fd_check(&[3, 5], 12, 8, |t, x| {
            softmax(t, x).square().sum_all()
        });
        fd_check(&[3, 5], 13, 8, |t, x| log_softmax(t, x).mean_all());
        fd_check(&[4, 4], 14, 6, |t, x| {
            let m = t.constant(ArrayD::from_elem(IxDyn(&[4, 4]), 0.3));
            x.maximum(m).sum_all()
        });
    }

    #[test]
    fn grad_conv_family() {
        fd_check(&[2, 2, 5, 5], 15, 8, |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(95);
            let w = t.constant(rand_array(&[3, 2, 3, 3], &mut rng));
            x.conv2d(w, 2, 1).square().sum_all()
        });
        // gradient with respect to the weights
        fd_check(&[3, 2, 3, 3], 16, 8, |t, w| {
            let mut rng = ChaCha8Rng::seed_from_u64(94);
            let x = t.constant(rand_array(&[2, 2, 5, 5], &mut rng));
            x.conv2d(w, 1, 1).tanh().sum_all()
        });
        fd_check(&[2, 3, 4, 4], 17, 8, |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(93);
            let w = t.constant(rand_array(&[3, 2, 4, 4], &mut rng));
            x.conv_t2d(w, 2, 1, (8, 8)).square().sum_all()
        });
        fd_check(&[3, 2, 4, 4], 18, 8, |t, w| {
            let mut rng = ChaCha8Rng::seed_from_u64(92);
            let x = t.constant(rand_array(&[2, 3, 4, 4], &mut rng));
            x.conv_t2d(w, 2, 1, (8, 8)).square().sum_all()
        });
    }

    #[test]
    fn second_order_polynomial() {
        // y = x^2, g = dy/dx = 2x, z = g^3 + y = 8x^3 + x^2,
        // dz/dx = 24x^2 + 2x = 100 at x = 2.
        let tape = Tape::new();
        let x = tape.variable(ArrayD::from_elem(IxDyn(&[]), 2.0));
        let y = x.square();
        let g = tape.backward(y, &[x])[0].unwrap();
        let z = g.mul(g).mul(g).add(y);
        let dz = tape.backward(z, &[x])[0].unwrap();
        assert!((dz.scalar() - 100.0).abs() < 1e-10, "got {}", dz.scalar());
    }

    #[test]
    fn second_order_grad_norm_matches_fd() {
        // s(x) = || d/dw [ sum(tanh(x @ w)) ] ||, differentiated w.r.t. x.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w0 = rand_array(&[4, 3], &mut rng);
        let x0 = rand_array(&[2, 4], &mut rng);

        let s_of = |xa: &ArrayD<f64>| -> f64 {
            let t = Tape::new();
            let x = t.variable(xa.clone());
            let w = t.variable(w0.clone());
            let loss = x.matmul(w).tanh().sum_all();
            let gw = t.backward(loss, &[w])[0].unwrap();
            global_norm(&t, &[gw], 1e-12).scalar()
        };

        let tape = Tape::new();
        let x = tape.variable(x0.clone());
        let w = tape.variable(w0.clone());
        let loss = x.matmul(w).tanh().sum_all();
        let gw = tape.backward(loss, &[w])[0].unwrap();
        let s = global_norm(&tape, &[gw], 1e-12);
        let dx = tape.backward(s, &[x])[0].expect("second order grad").array();

        let eps = 1e-5;
        for idx in [[0usize, 0], [0, 3], [1, 1], [1, 2]] {
            let mut up = x0.clone();
            up[IxDyn(&idx)] += eps;
            let mut dn = x0.clone();
            dn[IxDyn(&idx)] -= eps;
            let fd = (s_of(&up) - s_of(&dn)) / (2.0 * eps);
            let ad = dx[IxDyn(&idx)];
            assert!(
                (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8) < 1e-3,
                "fd {} ad {} at {:?}",
                fd,
                ad,
                idx
            );
        }
    }

    #[test]
    fn backward_returns_none_for_unrelated() {
        let tape = Tape::new();
        let x = tape.variable(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let y = tape.variable(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let loss = x.square().sum_all();
        let grads = tape.backward(loss, &[x, y]);
        assert!(grads[0].is_some());
        assert!(grads[1].is_none());
    }

    #[test]
    fn softmax_rows_normalize() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = tape.variable(rand_array(&[5, 9], &mut rng));
        let s = softmax(&tape, x).array();
        for row in s.axis_iter(ndarray::Axis(0)) {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
