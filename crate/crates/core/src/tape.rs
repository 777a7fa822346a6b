//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation appends one node holding its output value and the rule
//! needed to push an upstream gradient back to its inputs. `backward` walks
//! the record once in strict reverse order.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{flip_data, permute_data, Perm, Shape, Tensor4};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Backward rule for a user-supplied operation: receives the input values,
/// the output value and the upstream gradient, returns one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>> + Send + Sync>;

pub(crate) enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Permute { a: Var, perm: Perm },
    Flip { a: Var, axis: usize },
    Sum { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Conv2d { x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Gap { a: Var },
    Gmp { a: Var, argmax: Vec<usize> },
    ZPool { a: Var, argmax: Vec<usize> },
    MaxPool2d { a: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Permute { .. } => "permute",
            Op::Flip { .. } => "flip",
            Op::Sum { .. } => "sum",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Gap { .. } => "gap",
            Op::Gmp { .. } => "gmp",
            Op::ZPool { .. } => "zpool",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { .. } => "custom",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) shape: Shape,
    pub(crate) value: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Ordered record of operations. Confined to one thread at a time.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("ops", &self.nodes.iter().map(|n| n.op.name()).collect::<Vec<_>>())
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Discrete choices made by piecewise operations: the sign mask of every
    /// relu input and the argmax of every max-type reduction. Two recordings
    /// of the same graph with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu { a } => sig.extend(self.nodes[a.id].value.iter().map(|&v| (v > T::zero()) as usize)),
                Op::Gmp { argmax, .. } | Op::ZPool { argmax, .. } | Op::MaxPool2d { argmax, .. } => {
                    sig.extend_from_slice(argmax)
                }
                _ => {}
            }
        }
        sig
    }

    /// Names of recorded operations in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Contract("variable does not belong to this tape".into()));
        }
        Ok(())
    }

    pub(crate) fn node(&self, v: Var) -> &Node<T> {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.id]
    }

    pub(crate) fn push(&mut self, shape: Shape, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        let id = self.nodes.len();
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var { tape: self.id, id }
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.id].requires_grad)
    }

    pub(crate) fn owned(&self, vars: &[Var]) -> Result<()> {
        vars.iter().try_for_each(|&v| self.check(v))
    }

    /// Records a tensor as a leaf; it is differentiated iff `requires_grad` is set on it.
    pub fn leaf(&mut self, t: &Tensor4<T>) -> Var {
        self.push(t.shape(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor4<T>) -> Var {
        let shape = t.shape();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    /// Records a leaf that is differentiated.
    pub fn variable(&mut self, t: Tensor4<T>) -> Var {
        let shape = t.shape();
        self.push(shape, t.into_data(), true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor4<T> {
        let n = self.node(v);
        Tensor4::from_vec(n.shape, n.value.clone()).expect("node shape matches value")
    }

    fn broadcast_pair(&self, a: Var, b: Var, what: &str) -> Result<(Shape, Shape)> {
        self.owned(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !sa.accepts_broadcast(&sb) {
            return Err(Error::Dimension(format!("{what}: {sb} does not broadcast to {sa}")));
        }
        Ok((sa, sb))
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (va, vb) = (self.value(a), self.value(b));
        if sa == sb {
            return va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        }
        let mut out = Vec::with_capacity(va.len());
        let [n, c, h, w] = sa.0;
        let bs = sb.0;
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..h {
                    for i3 in 0..w {
                        let ob = sb.offset(
                            if bs[0] == 1 { 0 } else { i0 },
                            if bs[1] == 1 { 0 } else { i1 },
                            if bs[2] == 1 { 0 } else { i2 },
                            if bs[3] == 1 { 0 } else { i3 },
                        );
                        out.push(f(va[out.len()], vb[ob]));
                    }
                }
            }
        }
        out
    }

    /// `a + b`, with `b` broadcast to `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, _) = self.broadcast_pair(a, b, "add")?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(sa, out, rg, Op::Add { a, b }))
    }

    /// `a ⊙ b`, with `b` broadcast to `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, _) = self.broadcast_pair(a, b, "mul")?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(sa, out, rg, Op::Mul { a, b }))
    }

    /// Alias of [`Tape::mul`] for scaling by a lower-rank weight map.
    pub fn broadcast_mul(&mut self, a: Var, weights: Var) -> Result<Var> {
        self.mul(a, weights)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&v| v * factor).collect();
        let (s, rg) = (self.shape(a), self.requires_grad(a));
        Ok(self.push(s, out, rg, Op::Scale { a, factor }))
    }

    pub fn permute(&mut self, a: Var, perm: Perm) -> Result<Var> {
        self.check(a)?;
        perm.validate()?;
        let s = self.shape(a);
        let out = permute_data(self.value(a), s, perm);
        let rg = self.requires_grad(a);
        Ok(self.push(perm.apply_shape(s), out, rg, Op::Permute { a, perm }))
    }

    /// Reverses the order of axis `axis` (1 = C, 2 = H, 3 = W).
    pub fn flip(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        if !(1..=3).contains(&axis) {
            return Err(Error::Contract(format!("flip axis {axis} outside 1..=3")));
        }
        let s = self.shape(a);
        let out = flip_data(self.value(a), s, axis);
        let rg = self.requires_grad(a);
        Ok(self.push(s, out, rg, Op::Flip { a, axis }))
    }

    /// Sum of all elements, as a (1,1,1,1) tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let total = self.value(a).iter().copied().sum();
        let rg = self.requires_grad(a);
        Ok(self.push(Shape::scalar(), vec![total], rg, Op::Sum { a }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&v| sigmoid(v)).collect();
        let (s, rg) = (self.shape(a), self.requires_grad(a));
        Ok(self.push(s, out, rg, Op::Sigmoid { a }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&v| v.max(T::zero())).collect();
        let (s, rg) = (self.shape(a), self.requires_grad(a));
        Ok(self.push(s, out, rg, Op::Relu { a }))
    }

    /// Records an operation with a caller-provided value and backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Shape,
        value: Vec<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var> {
        self.owned(inputs)?;
        if shape.numel() != value.len() {
            return Err(Error::Dimension(format!(
                "custom op value has {} elements for shape {shape}",
                value.len()
            )));
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(shape, value, rg, Op::Custom { inputs: inputs.to_vec(), backward }))
    }

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.check(root)?;
        if !self.shape(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must have shape (1,1,1,1), got {}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![T::one()]);
        for id in (0..=root.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.id].requires_grad {
                return;
            }
            match &mut grads[v.id] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                if self.requires_grad(*b) {
                    send(*b, reduce_broadcast(g, node.shape, self.shape(*b)));
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    send(*a, self.zip_broadcast_with(g, node.shape, *b, |gv, bv| gv * bv));
                }
                if self.requires_grad(*b) {
                    let prod: Vec<T> = g.iter().zip(self.value(*a)).map(|(&x, &y)| x * y).collect();
                    send(*b, reduce_broadcast(&prod, node.shape, self.shape(*b)));
                }
            }
            Op::Scale { a, factor } => send(*a, g.iter().map(|&v| v * *factor).collect()),
            Op::Permute { a, perm } => send(*a, permute_data(g, node.shape, perm.inverse())),
            Op::Flip { a, axis } => send(*a, flip_data(g, node.shape, *axis)),
            Op::Sum { a } => send(*a, vec![g[0]; self.shape(*a).numel()]),
            Op::Sigmoid { a } => send(
                *a,
                g.iter().zip(&node.value).map(|(&gv, &s)| gv * s * (T::one() - s)).collect(),
            ),
            Op::Relu { a } => send(
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect(),
            ),
            Op::Conv2d { x, weight, bias, stride, padding } => {
                let xs = self.node(*x);
                let ws = self.node(*weight);
                let (dx, dw, db) = crate::nn::conv::conv2d_backward(
                    &xs.value, xs.shape, &ws.value, ws.shape, g, node.shape, *stride, *padding,
                    xs.requires_grad, ws.requires_grad,
                );
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dw) = dw {
                    send(*weight, dw);
                }
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        send(*b, db);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (dx, dgamma, dbeta) = crate::nn::batchnorm::batchnorm_backward(
                    g, node.shape, xhat, inv_std, self.value(*gamma), *train,
                );
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Gap { a } => {
                let s = self.shape(*a);
                let hw = s.h() * s.w();
                let inv = T::one() / T::from_usize_lossy(hw);
                let mut out = Vec::with_capacity(s.numel());
                for &gv in g {
                    out.extend(std::iter::repeat_n(gv * inv, hw));
                }
                send(*a, out);
            }
            Op::Gmp { a, argmax } | Op::MaxPool2d { a, argmax } => {
                let mut out = vec![T::zero(); self.shape(*a).numel()];
                for (&gv, &idx) in g.iter().zip(argmax) {
                    out[idx] = out[idx] + gv;
                }
                send(*a, out);
            }
            Op::ZPool { a, argmax } => {
                send(*a, crate::nn::pool::zpool_backward(g, self.shape(*a), argmax));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let s = self.shape(*logits);
                let classes = s.c();
                let scale = g[0] / T::from_usize_lossy(s.n());
                let mut out = probs.clone();
                for (n, &label) in labels.iter().enumerate() {
                    out[n * classes + label] = out[n * classes + label] - T::one();
                }
                out.iter_mut().for_each(|v| *v = *v * scale);
                send(*logits, out);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&[T]> = inputs.iter().map(|&v| self.value(v)).collect();
                let parts = backward(&vals, &node.value, g);
                for (&v, part) in inputs.iter().zip(parts) {
                    send(v, part);
                }
            }
        }
    }

    fn zip_broadcast_with(&self, g: &[T], gs: Shape, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let sb = self.shape(b);
        let vb = self.value(b);
        if gs == sb {
            return g.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        }
        let [n, c, h, w] = gs.0;
        let bs = sb.0;
        let mut out = Vec::with_capacity(g.len());
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..h {
                    for i3 in 0..w {
                        let ob = sb.offset(
                            if bs[0] == 1 { 0 } else { i0 },
                            if bs[1] == 1 { 0 } else { i1 },
                            if bs[2] == 1 { 0 } else { i2 },
                            if bs[3] == 1 { 0 } else { i3 },
                        );
                        out.push(f(g[out.len()], vb[ob]));
                    }
                }
            }
        }
        out
    }
}

/// Sums `g` (shaped `full`) down to the broadcast source shape `small`.
fn reduce_broadcast<T: Scalar>(g: &[T], full: Shape, small: Shape) -> Vec<T> {
    if full == small {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); small.numel()];
    let [n, c, h, w] = full.0;
    let bs = small.0;
    let mut i = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                for i3 in 0..w {
                    let ob = small.offset(
                        if bs[0] == 1 { 0 } else { i0 },
                        if bs[1] == 1 { 0 } else { i1 },
                        if bs[2] == 1 { 0 } else { i2 },
                        if bs[3] == 1 { 0 } else { i3 },
                    );
                    out[ob] = out[ob] + g[i];
                    i += 1;
                }
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    // split on sign so exp never overflows
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, reading unreached nodes as exact zeros.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tape.shape(v).numel()])
    }

    /// Adds the gradient for `v` into `t`'s gradient buffer when `t` requires one.
    pub fn accumulate_into(&self, tape: &Tape<T>, v: Var, t: &mut Tensor4<T>) -> Result<()> {
        if !t.requires_grad() {
            return Ok(());
        }
        t.accumulate_grad(&self.wrt(tape, v))
    }
}
