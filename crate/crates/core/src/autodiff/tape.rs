use std::collections::HashMap;

use crate::scalar::{gemm, Gemm, Real};

use super::tensor::{broadcast_index, broadcast_shapes, reduce_to};
use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Neg(Var),
    Recip(Var),
    Powf(Var, T),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Cos(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Scale(Var, T),
    AddScalar(Var),
    ClampMin(Var, T),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    BroadcastTo(Var),
    Reshape(Var),
    CumsumExclusive(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run recording of tensor operations for reverse-mode
/// differentiation. Build a fresh tape for every forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Gradients of one backward pass, indexed by tape variable.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Grads<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// (outer, axis length, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` yields nothing.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Places a parameter on the tape. Repeated calls return the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            needs_grad: self.grad_enabled && store.requires_grad(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Treats an existing variable as differentiable even though it is not a
    /// stored parameter. Used to take gradients with respect to inputs.
    pub fn watch(&mut self, value: Tensor<T>) -> Var {
        let grad = self.grad_enabled;
        let v = self.constant(value);
        self.nodes[v.0].needs_grad = grad;
        v
    }

    // ---- elementwise binary -------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape =
            broadcast_shapes(ta.shape(), tb.shape()).ok_or_else(|| AutodiffError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(out_shape, data)?
        } else if let Some(data) = suffix_broadcast(ta.data(), tb.data(), ta.shape(), tb.shape(), &out_shape, &f) {
            Tensor::new(out_shape, data)?
        } else {
            let ia = broadcast_index(ta.shape(), &out_shape);
            let ib = broadcast_index(tb.shape(), &out_shape);
            let n: usize = out_shape.iter().product();
            let (da, db) = (ta.data(), tb.data());
            let data = (0..n).map(|i| f(da[ia.at(i)], db[ib.at(i)])).collect();
            Tensor::new(out_shape, data)?
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- linear algebra -----------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`; a 1-D right operand gives `[m]`, a 1-D left
    /// operand gives `[n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let (m, k, lhs_vec) = match ta.shape() {
            [m, k] => (*m, *k, false),
            [k] => (1, *k, true),
            _ => return Err(mismatch()),
        };
        let (k2, n, rhs_vec) = match tb.shape() {
            [k2, n] => (*k2, *n, false),
            [k2] => (*k2, 1, true),
            _ => return Err(mismatch()),
        };
        if k != k2 || (lhs_vec && rhs_vec) {
            return Err(mismatch());
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let shape = match (lhs_vec, rhs_vec) {
            (false, false) => vec![m, n],
            (false, true) => vec![m],
            (true, false) => vec![n],
            (true, true) => unreachable!(),
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = &self.nodes[a.0].value;
        let [r, c] = *ta.shape() else {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        };
        let value = Tensor::new(vec![c, r], transpose_raw(ta.data(), r, c))?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    // ---- elementwise unary --------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.recip(), Op::Recip(a))
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), Op::Cos(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Addition of a constant.
    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// `max(a, c)` elementwise.
    pub fn clamp_min(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x.max(c), Op::ClampMin(a, c))
    }

    // ---- reductions and shape -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = &self.nodes[a.0].value;
        if t.numel() == 0 {
            return Err(AutodiffError::InvalidArgument("mean of empty tensor".into()));
        }
        let s: T = t.data().iter().copied().sum();
        let m = s / T::lit(t.numel() as f64);
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(a), &[a]))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(), AutodiffError> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "{op}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(())
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.check_axis("sum_axis", a, axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let src = t.data();
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumAxis(a), &[a]))
    }

    /// Exclusive prefix sum along `axis`: `out[j] = sum_{j' < j} a[j']`.
    pub fn cumsum_exclusive(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.check_axis("cumsum_exclusive", a, axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for j in 0..n {
                    let idx = (o * n + j) * inner + i;
                    out[idx] = acc;
                    acc += src[idx];
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::CumsumExclusive(a, axis), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, AutodiffError> {
        self.check_axis("slice", a, axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        if start + len > n {
            return Err(AutodiffError::InvalidArgument(format!(
                "slice: range {start}..{} out of bounds for axis {axis} of shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { input: a, axis, start }, &[a]))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = &self.nodes[a.0].value;
        match broadcast_shapes(t.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let idx = broadcast_index(t.shape(), shape);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| t.data()[idx.at(i)]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::BroadcastTo(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    // ---- composites -----------------------------------------------------

    /// `x @ w + b` for `x: [m, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.mul(a, a)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; returns per-variable gradients.
    pub fn gradients(&self, loss: Var) -> Result<Grads<T>, AutodiffError> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Reverse sweep that accumulates `d loss / d param` into the grad slot
    /// of every parameter placed on this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<(), AutodiffError> {
        for (id, g) in self.param_gradients(loss)? {
            if store.requires_grad(id) {
                store.accumulate_grad(id, &g);
            }
        }
        Ok(())
    }

    /// Like [`backward`](Self::backward) but returns the parameter gradients,
    /// sorted by id, instead of accumulating them. Lets independent tapes run
    /// on separate threads and be reduced in a fixed order afterwards.
    pub fn param_gradients(&self, loss: Var) -> Result<Vec<(ParamId, Tensor<T>)>, AutodiffError> {
        let mut grads = self.gradients(loss)?;
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| *p);
        Ok(params
            .into_iter()
            .filter_map(|(id, var)| grads.grads.get_mut(var.0).and_then(Option::take).map(|g| (id, g)))
            .collect())
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let push = |v: Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        let unary_rule = |a: Var, f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            // f(input, output, upstream)
            let x = val(a).data();
            let y = node.value.data();
            let data = g
                .data()
                .iter()
                .enumerate()
                .map(|(k, &gk)| f(x[k], y[k], gk))
                .collect();
            Tensor::new(val(a).shape().to_vec(), data).expect("unary shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    push(*a, reduce_to(g, val(*a).shape()), grads);
                }
                if wants(*b) {
                    push(*b, reduce_to(g, val(*b).shape()), grads);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    push(*a, reduce_to(g, val(*a).shape()), grads);
                }
                if wants(*b) {
                    push(*b, reduce_to(&g.map(|x| -x), val(*b).shape()), grads);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let t = broadcast_combine(g, val(*b), |gk, y| gk * y);
                    push(*a, reduce_to(&t, val(*a).shape()), grads);
                }
                if wants(*b) {
                    let t = broadcast_combine(g, val(*a), |gk, x| gk * x);
                    push(*b, reduce_to(&t, val(*b).shape()), grads);
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    let t = broadcast_combine(g, val(*b), |gk, y| gk / y);
                    push(*a, reduce_to(&t, val(*a).shape()), grads);
                }
                if wants(*b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let q = broadcast_combine(&node.value, val(*b), |o, y| -o / y);
                    let t = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(q.data()).map(|(&x, &y)| x * y).collect(),
                    )
                    .expect("div grad");
                    push(*b, reduce_to(&t, val(*b).shape()), grads);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = match ta.shape() {
                    [m, k] => (*m, *k),
                    [k] => (1, *k),
                    _ => unreachable!(),
                };
                let n = if tb.shape().len() == 2 { tb.shape()[1] } else { 1 };
                let gd = g.data();
                if wants(*a) {
                    // dA = G B^T
                    let mut da = vec![T::zero(); m * k];
                    gemm(Gemm { m, k: n, n: k, a: (n, 1), b: (1, n) }, gd, tb.data(), &mut da);
                    push(*a, Tensor::new(ta.shape().to_vec(), da).expect("matmul grad"), grads);
                }
                if wants(*b) {
                    // dB = A^T G
                    let mut db = vec![T::zero(); k * n];
                    gemm(Gemm { m: k, k: m, n, a: (1, k), b: (n, 1) }, ta.data(), gd, &mut db);
                    push(*b, Tensor::new(tb.shape().to_vec(), db).expect("matmul grad"), grads);
                }
            }
            Op::Transpose(a) => {
                let [r, c] = *g.shape() else { unreachable!() };
                let t = Tensor::new(vec![c, r], transpose_raw(g.data(), r, c)).expect("transpose");
                push(*a, t, grads);
            }
            Op::Neg(a) => push(*a, g.map(|x| -x), grads),
            Op::Recip(a) => push(*a, unary_rule(*a, &|_, y, gk| -gk * y * y), grads),
            Op::Powf(a, p) => {
                let p = *p;
                push(
                    *a,
                    unary_rule(*a, &|x, _, gk| gk * p * x.powf(p - T::one())),
                    grads,
                )
            }
            Op::Sqrt(a) => push(*a, unary_rule(*a, &|_, y, gk| gk * T::lit(0.5) / y), grads),
            Op::Exp(a) => push(*a, unary_rule(*a, &|_, y, gk| gk * y), grads),
            Op::Ln(a) => push(*a, unary_rule(*a, &|x, _, gk| gk / x), grads),
            Op::Sin(a) => push(*a, unary_rule(*a, &|x, _, gk| gk * x.cos()), grads),
            Op::Cos(a) => push(*a, unary_rule(*a, &|x, _, gk| -gk * x.sin()), grads),
            Op::Relu(a) => push(
                *a,
                unary_rule(*a, &|x, _, gk| if x > T::zero() { gk } else { T::zero() }),
                grads,
            ),
            Op::Sigmoid(a) => push(
                *a,
                unary_rule(*a, &|_, y, gk| gk * y * (T::one() - y)),
                grads,
            ),
            Op::Softplus(a) => push(*a, unary_rule(*a, &|x, _, gk| gk * sigmoid(x)), grads),
            Op::Scale(a, c) => {
                let c = *c;
                push(*a, g.map(|x| x * c), grads)
            }
            Op::AddScalar(a) => push(*a, g.clone(), grads),
            Op::ClampMin(a, c) => {
                let c = *c;
                push(
                    *a,
                    unary_rule(*a, &|x, _, gk| if x > c { gk } else { T::zero() }),
                    grads,
                )
            }
            Op::SumAll(a) => push(*a, Tensor::full(val(*a).shape(), g.item()), grads),
            Op::MeanAll(a) => {
                let n = T::lit(val(*a).numel() as f64);
                push(*a, Tensor::full(val(*a).shape(), g.item() / n), grads)
            }
            Op::SumAxis(a) => {
                // upstream has the axis collapsed to 1: broadcast back
                let shape = val(*a).shape();
                let idx = broadcast_index(g.shape(), shape);
                let n: usize = shape.iter().product();
                let data = (0..n).map(|k| g.data()[idx.at(k)]).collect();
                push(*a, Tensor::new(shape.to_vec(), data).expect("sum_axis grad"), grads);
            }
            Op::BroadcastTo(a) => push(*a, reduce_to(g, val(*a).shape()), grads),
            Op::Reshape(a) => {
                let t = g.clone().reshaped(val(*a).shape()).expect("reshape grad");
                push(*a, t, grads)
            }
            Op::CumsumExclusive(a, axis) => {
                let (outer, n, inner) = split_axis(g.shape(), *axis);
                let gd = g.data();
                let mut out = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut acc = T::zero();
                        for j in (0..n).rev() {
                            let idx = (o * n + j) * inner + i;
                            out[idx] = acc;
                            acc += gd[idx];
                        }
                    }
                }
                push(*a, Tensor::new(g.shape().to_vec(), out).expect("cumsum grad"), grads)
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = val(p).shape();
                    let n = shape[*axis];
                    if wants(p) {
                        let mut out = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            out.extend_from_slice(&g.data()[base..base + n * inner]);
                        }
                        push(p, Tensor::new(shape.to_vec(), out).expect("concat grad"), grads);
                    }
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = val(*input).shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let len = g.shape()[*axis];
                let mut out = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                push(*input, Tensor::new(shape.to_vec(), out).expect("slice grad"), grads)
            }
        }
    }
}

/// `f(g[i], other broadcast to g's shape at i)`.
fn broadcast_combine<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let idx = broadcast_index(other.shape(), g.shape());
    let od = other.data();
    let data = g
        .data()
        .iter()
        .enumerate()
        .map(|(i, &gk)| f(gk, od[idx.at(i)]))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("broadcast combine")
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn transpose_raw<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Row-major `[m,k] x [k,n]`. Each output row is computed independently in a
/// fixed order, so results do not depend on the thread count.
/// Fast path for the common case where one operand's shape (ignoring
/// leading ones) is a suffix of the other's, e.g. a bias row added to a batch.
fn suffix_broadcast<T: Real>(
    da: &[T],
    db: &[T],
    sa: &[usize],
    sb: &[usize],
    out: &[usize],
    f: &impl Fn(T, T) -> T,
) -> Option<Vec<T>> {
    let strip = |s: &[usize]| -> usize { s.iter().take_while(|&&d| d == 1).count() };
    let is_suffix = |s: &[usize]| out.ends_with(&s[strip(s)..]);
    if sa == out && is_suffix(sb) && !db.is_empty() {
        let nb = db.len();
        Some(da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect())
    } else if sb == out && is_suffix(sa) && !da.is_empty() {
        let na = da.len();
        Some(db.iter().enumerate().map(|(i, &y)| f(da[i % na], y)).collect())
    } else {
        None
    }
}

fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(Gemm { m, k, n, a: (k, 1), b: (n, 1) }, a, b, &mut out);
    out
}
