//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and an
//! [`Op`] record naming its inputs plus whatever intermediates the backward rule
//! needs. [`Tape::backward`] replays the records in reverse order.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_grad_input, conv2d_grad_weight, gemm, resample, resample_grad, softmax_rows,
    standardize_groups, Direction, GroupStats, Real, Tensor,
};

/// Backward record for one tape node.
#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddConst(usize),
    AddBcast { x: usize, c: usize, outer: usize, mid: usize, inner: usize },
    MulBcast { x: usize, c: usize, outer: usize, mid: usize, inner: usize },
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    TransposeLast2(usize),
    Reshape(usize),
    SwapAxes12(usize),
    Softmax(usize),
    LeakyRelu(usize, T),
    Powf(usize, T),
    Softplus(usize),
    Clamp(usize, T, T),
    Standardize { x: usize, outer: usize, len: usize, inner: usize, eps: T, stats: GroupStats<T> },
    SumAll(usize),
    SumAxis { x: usize, outer: usize, len: usize, inner: usize },
    Conv2d { x: usize, w: usize },
    Resample(usize, Direction),
    ConcatLast(Vec<usize>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::AddBcast { .. } => "add_bcast",
            Op::MulBcast { .. } => "mul_bcast",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::TransposeLast2(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SwapAxes12(..) => "swap_axes12",
            Op::Softmax(..) => "softmax",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Powf(..) => "powf",
            Op::Softplus(..) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Standardize { .. } => "standardize",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Conv2d { .. } => "conv2d",
            Op::Resample(..) => "resample",
            Op::ConcatLast(..) => "concat",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddBcast { x, c, .. } | Op::MulBcast { x, c, .. } => vec![*x, *c],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w } => vec![*x, *w],
            Op::Scale(x, _)
            | Op::AddConst(x)
            | Op::TransposeLast2(x)
            | Op::Reshape(x)
            | Op::SwapAxes12(x)
            | Op::Softmax(x)
            | Op::LeakyRelu(x, _)
            | Op::Powf(x, _)
            | Op::Softplus(x)
            | Op::Clamp(x, _, _)
            | Op::SumAll(x)
            | Op::Resample(x, _) => vec![*x],
            Op::Standardize { x, .. } | Op::SumAxis { x, .. } => vec![*x],
            Op::ConcatLast(parts) => parts.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for a later reverse sweep. One tape per step;
/// a tape is never shared across threads.
#[derive(Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }

    /// Gradient with respect to `var`, or zeros when it does not influence the output.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

fn split3(shape: &[usize], axis: usize, span: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let mid = shape[axis..axis + span].iter().product();
    let inner = shape[axis + span..].iter().product();
    (outer, mid, inner)
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

    /// Differentiable input (parameter or probe point).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Non-differentiable input such as data, noise or frozen weights.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from `output`, seeded with ones (the gradient of `sum(output)`).
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::ones(nodes[output.id].value.shape()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            backward_node(&nodes, node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize, g: Tensor<T>) -> Result<()> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn wants<T>(nodes: &[Node<T>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backward_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone())?;
            accumulate(grads, nodes, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone())?;
            accumulate(grads, nodes, *b, g.scale(-T::one()))?;
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                accumulate(grads, nodes, *a, g.zip_map(val(*b), "mul", |g, y| g * y)?)?;
            }
            if wants(nodes, *b) {
                accumulate(grads, nodes, *b, g.zip_map(val(*a), "mul", |g, x| g * x)?)?;
            }
        }
        Op::Scale(x, c) => accumulate(grads, nodes, *x, g.scale(*c))?,
        Op::AddConst(x) => accumulate(grads, nodes, *x, g.clone())?,
        Op::AddBcast { x, c, outer, mid, inner } => {
            accumulate(grads, nodes, *x, g.clone())?;
            if wants(nodes, *c) {
                let mut gc = vec![T::zero(); *mid];
                for o in 0..*outer {
                    for (m, slot) in gc.iter_mut().enumerate() {
                        let base = (o * mid + m) * inner;
                        *slot += g.data()[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                accumulate(grads, nodes, *c, Tensor::new(val(*c).shape().to_vec(), gc)?)?;
            }
        }
        Op::MulBcast { x, c, outer, mid, inner } => {
            let (xv, cv) = (val(*x), val(*c));
            if wants(nodes, *x) {
                let mut gx = g.clone();
                for o in 0..*outer {
                    for m in 0..*mid {
                        let base = (o * mid + m) * inner;
                        let s = cv.data()[m];
                        gx.data_mut()[base..base + inner].iter_mut().for_each(|v| *v *= s);
                    }
                }
                accumulate(grads, nodes, *x, gx)?;
            }
            if wants(nodes, *c) {
                let mut gc = vec![T::zero(); *mid];
                for o in 0..*outer {
                    for (m, slot) in gc.iter_mut().enumerate() {
                        let base = (o * mid + m) * inner;
                        *slot += g.data()[base..base + inner]
                            .iter()
                            .zip(&xv.data()[base..base + inner])
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                    }
                }
                accumulate(grads, nodes, *c, Tensor::new(cv.shape().to_vec(), gc)?)?;
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(nodes, *a) {
                let mut ga = vec![T::zero(); m * k];
                gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                accumulate(grads, nodes, *a, Tensor::new([m, k], ga)?)?;
            }
            if wants(nodes, *b) {
                let mut gb = vec![T::zero(); k * n];
                gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                accumulate(grads, nodes, *b, Tensor::new([k, n], gb)?)?;
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (bt, p, q) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let r = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
            if wants(nodes, *a) {
                let mut ga = vec![T::zero(); bt * p * q];
                for i in 0..bt {
                    let gi = &g.data()[i * p * r..(i + 1) * p * r];
                    let bi = &bv.data()[i * q * r..(i + 1) * q * r];
                    gemm(p, r, q, gi, false, bi, !*trans_b, &mut ga[i * p * q..(i + 1) * p * q], false);
                }
                accumulate(grads, nodes, *a, Tensor::new(av.shape().to_vec(), ga)?)?;
            }
            if wants(nodes, *b) {
                let mut gb = vec![T::zero(); bt * q * r];
                for i in 0..bt {
                    let gi = &g.data()[i * p * r..(i + 1) * p * r];
                    let ai = &av.data()[i * p * q..(i + 1) * p * q];
                    let dst = &mut gb[i * q * r..(i + 1) * q * r];
                    if *trans_b {
                        gemm(r, p, q, gi, true, ai, false, dst, false);
                    } else {
                        gemm(q, p, r, ai, true, gi, false, dst, false);
                    }
                }
                accumulate(grads, nodes, *b, Tensor::new(bv.shape().to_vec(), gb)?)?;
            }
        }
        Op::TransposeLast2(x) => {
            let gx = g.transpose_last2().reshape(val(*x).shape().to_vec())?;
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, g.clone().reshape(val(*x).shape().to_vec())?)?,
        Op::SwapAxes12(x) => {
            let gx = swap_axes12(g).reshape(val(*x).shape().to_vec())?;
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let q = *y.shape().last().expect("shape");
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(q).zip(y.data().chunks(q)) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (gv, &yv) in grow.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::LeakyRelu(x, slope) => {
            let gx = g.zip_map(val(*x), "leaky_relu", |g, x| if x >= T::zero() { g } else { g * *slope })?;
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::Powf(x, p) => {
            let gx = g.zip_map(val(*x), "powf", |g, x| g * *p * x.powf(*p - T::one()))?;
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::Softplus(x) => {
            let gx = g.zip_map(val(*x), "softplus", |g, x| g * sigmoid(x))?;
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::Clamp(x, lo, hi) => {
            let gx = g.zip_map(val(*x), "clamp", |g, x| if x >= *lo && x <= *hi { g } else { T::zero() })?;
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::Standardize { x, outer, len, inner, eps, stats } => {
            let xv = val(*x);
            let mut gx = vec![T::zero(); xv.numel()];
            let n = T::from_usize(*len).expect("len");
            for o in 0..*outer {
                let base = o * len * inner;
                for i in 0..*inner {
                    let at = |l: usize| base + l * inner + i;
                    let mu = stats.mean[o * inner + i];
                    let sd = stats.std[o * inner + i];
                    let s = sd + *eps;
                    let g_mean = (0..*len).map(|l| g.data()[at(l)]).sum::<T>() / n;
                    let g_dot = (0..*len).map(|l| g.data()[at(l)] * (xv.data()[at(l)] - mu)).sum::<T>();
                    let coef = if sd > T::zero() { g_dot / (n * sd * s * s) } else { T::zero() };
                    for l in 0..*len {
                        gx[at(l)] = (g.data()[at(l)] - g_mean) / s - (xv.data()[at(l)] - mu) * coef;
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
        }
        Op::SumAll(x) => accumulate(grads, nodes, *x, Tensor::full(val(*x).shape().to_vec(), g.item()))?,
        Op::SumAxis { x, outer, len, inner } => {
            let xv = val(*x);
            let mut gx = vec![T::zero(); xv.numel()];
            for o in 0..*outer {
                for l in 0..*len {
                    let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
        }
        Op::Conv2d { x, w } => {
            let (xv, wv) = (val(*x), val(*w));
            if wants(nodes, *x) {
                accumulate(grads, nodes, *x, conv2d_grad_input(g, xv.shape(), wv))?;
            }
            if wants(nodes, *w) {
                accumulate(grads, nodes, *w, conv2d_grad_weight(g, xv, wv.shape()))?;
            }
        }
        Op::Resample(x, dir) => accumulate(grads, nodes, *x, resample_grad(g, val(*x).shape(), *dir))?,
        Op::ConcatLast(parts) => {
            let rows = g.shape()[0];
            let total = g.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let width = val(p).shape()[1];
                if wants(nodes, p) {
                    let mut gp = Vec::with_capacity(rows * width);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + width]);
                    }
                    accumulate(grads, nodes, p, Tensor::new([rows, width], gp)?)?;
                }
                offset += width;
            }
        }
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `[a, b, c, d] -> [a, c, b, d]`.
fn swap_axes12<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![T::zero(); x.numel()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
            }
        }
    }
    Tensor::new([a, c, b, d], out).expect("same numel")
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.tape.value_ref(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the current value onto the tape as a constant.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn elementwise(self, other: Var<'t, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            a.zip_map(&b, op.name(), f)?
        };
        self.tape.push(out, op)
    }

    fn unary(self, op: Op<T>, f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Var<'t, T>> {
        let out = f(&self.tape.value_ref(self.id))?;
        self.tape.push(out, op)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        self.unary(Op::Scale(self.id, c), |x| Ok(x.scale(c)))
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        self.unary(Op::AddConst(self.id), |x| Ok(x.map(|v| v + c)))
    }

    fn bcast_dims(&self, c: &Var<'t, T>, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        self.same_tape(c);
        let xs = self.shape();
        let cs = c.shape();
        if axis + cs.len() > xs.len() || xs[axis..axis + cs.len()] != cs[..] {
            return Err(Error::shape(op, &xs, &cs));
        }
        Ok(split3(&xs, axis, cs.len()))
    }

    /// `x + c` where `c`'s shape matches `x.shape[axis..axis + c.ndim]`.
    pub fn add_bcast(self, c: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        let (outer, mid, inner) = self.bcast_dims(&c, axis, "add_bcast")?;
        let out = {
            let mut out = self.tape.value_ref(self.id).clone();
            let cv = self.tape.value_ref(c.id);
            for o in 0..outer {
                for m in 0..mid {
                    let s = cv.data()[m];
                    let base = (o * mid + m) * inner;
                    out.data_mut()[base..base + inner].iter_mut().for_each(|v| *v += s);
                }
            }
            out
        };
        self.tape.push(out, Op::AddBcast { x: self.id, c: c.id, outer, mid, inner })
    }

    /// `x * c` where `c`'s shape matches `x.shape[axis..axis + c.ndim]`.
    pub fn mul_bcast(self, c: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        let (outer, mid, inner) = self.bcast_dims(&c, axis, "mul_bcast")?;
        self.mul_bcast_dims(c, outer, mid, inner)
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar_var(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&s);
        let ss = s.shape();
        if ss.iter().product::<usize>() != 1 {
            return Err(Error::shape("mul_scalar_var", &self.shape(), &ss));
        }
        let n = self.tape.value_ref(self.id).numel();
        self.mul_bcast_dims(s, 1, 1, n)
    }

    fn mul_bcast_dims(self, c: Var<'t, T>, outer: usize, mid: usize, inner: usize) -> Result<Var<'t, T>> {
        let out = {
            let mut out = self.tape.value_ref(self.id).clone();
            let cv = self.tape.value_ref(c.id);
            for o in 0..outer {
                for m in 0..mid {
                    let s = cv.data()[m];
                    let base = (o * mid + m) * inner;
                    out.data_mut()[base..base + inner].iter_mut().for_each(|v| *v *= s);
                }
            }
            out
        };
        self.tape.push(out, Op::MulBcast { x: self.id, c: c.id, outer, mid, inner })
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            crate::tensor::matmul(&a, &b)?
        };
        self.tape.push(out, Op::MatMul(self.id, other.id))
    }

    /// Applies a `[d_in, d_out]` weight to the last axis of an arbitrary-rank input.
    pub fn linear(self, weight: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let d_in = *shape.last().expect("shape");
        let rows = shape.iter().product::<usize>() / d_in;
        let ws = weight.shape();
        if ws.len() != 2 || ws[0] != d_in {
            return Err(Error::shape("linear", &shape, &ws));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().expect("shape") = ws[1];
        self.reshape(vec![rows, d_in])?.matmul(weight)?.reshape(out_shape)
    }

    fn bmm_impl(self, other: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            let (sa, sb) = (a.shape(), b.shape());
            let ok = sa.len() == 3
                && sb.len() == 3
                && sa[0] == sb[0]
                && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
            if !ok {
                return Err(Error::shape("batch_matmul", sa, sb));
            }
            let (bt, p, q) = (sa[0], sa[1], sa[2]);
            let r = if trans_b { sb[1] } else { sb[2] };
            let mut out = vec![T::zero(); bt * p * r];
            for i in 0..bt {
                gemm(
                    p,
                    q,
                    r,
                    &a.data()[i * p * q..(i + 1) * p * q],
                    false,
                    &b.data()[i * q * r..(i + 1) * q * r],
                    trans_b,
                    &mut out[i * p * r..(i + 1) * p * r],
                    false,
                );
            }
            Tensor::new([bt, p, r], out)?
        };
        self.tape.push(out, Op::BatchMatMul { a: self.id, b: other.id, trans_b })
    }

    /// Batched `A·B` for `[B,p,q] × [B,q,r]`.
    pub fn bmm(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.bmm_impl(other, false)
    }

    /// Batched `A·Bᵀ` for `[B,p,q] × [B,r,q]`.
    pub fn bmm_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.bmm_impl(other, true)
    }

    pub fn transpose_last2(self) -> Result<Var<'t, T>> {
        if self.shape().len() < 2 {
            return Err(Error::invalid("transpose needs at least 2 axes"));
        }
        self.unary(Op::TransposeLast2(self.id), |x| Ok(x.transpose_last2()))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        self.unary(Op::Reshape(self.id), |x| x.clone().reshape(shape.clone()))
    }

    /// 4-D axis swap `[a, b, c, d] -> [a, c, b, d]`, used to split attention heads.
    pub fn swap_axes12(self) -> Result<Var<'t, T>> {
        if self.shape().len() != 4 {
            return Err(Error::invalid("swap_axes12 needs a 4-D input"));
        }
        self.unary(Op::SwapAxes12(self.id), |x| Ok(swap_axes12(x)))
    }

    pub fn softmax(self) -> Result<Var<'t, T>> {
        self.unary(Op::Softmax(self.id), |x| Ok(softmax_rows(x)))
    }

    pub fn leaky_relu(self, slope: T) -> Result<Var<'t, T>> {
        self.unary(Op::LeakyRelu(self.id, slope), |x| Ok(crate::tensor::leaky_relu(x, slope)))
    }

    pub fn powf(self, p: T) -> Result<Var<'t, T>> {
        self.unary(Op::Powf(self.id, p), |x| Ok(x.map(|v| v.powf(p))))
    }

    pub fn softplus(self) -> Result<Var<'t, T>> {
        self.unary(Op::Softplus(self.id), |x| Ok(x.map(softplus)))
    }

    pub fn clamp(self, lo: T, hi: T) -> Result<Var<'t, T>> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| Ok(x.map(|v| v.max(lo).min(hi))))
    }

    /// `(x − μ) / (σ + eps)` over `axis`, with population statistics.
    pub fn standardize(self, axis: usize, eps: T) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split3(&shape, axis, 1);
        let (out, stats) = {
            let x = self.tape.value_ref(self.id);
            standardize_groups(x.data(), outer, len, inner, eps)
        };
        let op = Op::Standardize { x: self.id, outer, len, inner, eps, stats };
        self.tape.push(Tensor::new(shape, out)?, op)
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        self.unary(Op::SumAll(self.id), |x| Ok(Tensor::scalar(x.sum())))
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = T::from_usize(self.tape.value_ref(self.id).numel()).expect("numel");
        self.sum()?.scale(T::one() / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::invalid(format!("cannot reduce axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split3(&shape, axis, 1);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = {
            let x = self.tape.value_ref(self.id);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Tensor::new(out_shape, out)?
        };
        self.tape.push(out, Op::SumAxis { x: self.id, outer, len, inner })
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let len = self.shape()[axis];
        self.sum_axis(axis)?.scale(T::one() / T::from_usize(len).expect("len"))
    }

    pub fn conv2d(self, weight: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&weight);
        let out = {
            let x = self.tape.value_ref(self.id);
            let w = self.tape.value_ref(weight.id);
            conv2d(&x, &w)?
        };
        self.tape.push(out, Op::Conv2d { x: self.id, w: weight.id })
    }

    pub fn resample(self, direction: Direction) -> Result<Var<'t, T>> {
        self.unary(Op::Resample(self.id, direction), |x| resample(x, direction))
    }

    /// Concatenates 2-D `[rows, w_i]` inputs along the last axis.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let tape = first.tape;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let rows = shapes[0][0];
        for s in &shapes {
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat", &shapes[0], s));
            }
        }
        let total: usize = shapes.iter().map(|s| s[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        {
            let values: Vec<_> = parts.iter().map(|p| tape.value_ref(p.id)).collect();
            for r in 0..rows {
                for (v, s) in values.iter().zip(&shapes) {
                    out.extend_from_slice(&v.data()[r * s[1]..(r + 1) * s[1]]);
                }
            }
        }
        tape.push(Tensor::new([rows, total], out)?, Op::ConcatLast(parts.iter().map(|p| p.id).collect()))
    }
}
