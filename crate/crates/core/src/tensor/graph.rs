use std::sync::Arc;

use super::{axis_split, Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Constant sparse matrix applied to the rows of a rank-2 tensor:
/// output row `r` is `sum(w * input[c])` over the `(c, w)` entries of row `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows<F> {
    rows: Vec<Vec<(usize, F)>>,
    input_rows: usize,
}

impl<F: Real> SparseRows<F> {
    pub fn new(rows: Vec<Vec<(usize, F)>>, input_rows: usize) -> Result<Self, TensorError> {
        for &(c, _) in rows.iter().flatten() {
            if c >= input_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "sparse_rows",
                    index: c,
                    extent: input_rows,
                });
            }
        }
        Ok(Self { rows, input_rows })
    }

    pub fn rows(&self) -> &[Vec<(usize, F)>] {
        &self.rows
    }

    pub fn input_rows(&self) -> usize {
        self.input_rows
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G) -> SparseRows<G> {
        SparseRows {
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|&(c, w)| (c, f(w))).collect())
                .collect(),
            input_rows: self.input_rows,
        }
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, F),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Dot(Var, Var),
    Norm(Var),
    NormLast(Var),
    Softmax(Var, usize),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    MixRows(Var, Arc<SparseRows<F>>),
    Reshape(Var),
    Repeat(Var, usize),
    ScaleLast(Var, Var),
    MaxAxis0(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to each registered parameter, in
/// registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    grads: Vec<Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, index: usize) -> &Tensor<F> {
        &self.grads[index]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.grads.iter()
    }

    pub fn into_vec(self) -> Vec<Tensor<F>> {
        self.grads
    }
}

/// Recording of one forward computation.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// reverse topological order for the backward sweep.
#[derive(Clone, Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: Vec<Var>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Registered parameters, in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        let v = self.push(value, Op::Param, true);
        self.params.push(v);
        v
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        make: fn(Var, Var) -> Op<F>,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, make(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| f(*x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, F::tanh, Op::Tanh(a))
    }

    /// `max(0, x)` elementwise; NaN stays NaN.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x < F::zero() { F::zero() } else { x },
            Op::Relu(a),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `[m, k] x [k] -> [m]`
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var, TensorError> {
        let (ta, tx) = (self.value(a), self.value(x));
        if ta.rank() != 2 || tx.rank() != 1 || ta.shape()[1] != tx.shape()[0] {
            return Err(mismatch("matvec", ta.shape(), tx.shape()));
        }
        let data = ta.rows().map(|row| super::dot(row, tx.data())).collect();
        let rg = self.rg(a) || self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![ta.shape()[0]],
                data,
            },
            Op::MatVec(a, x),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: t.shape().to_vec(),
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let value = Tensor {
            shape: vec![n, m],
            data: transpose_raw(t.data(), m, n),
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Inner product of two same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("dot", ta.shape(), tb.shape()));
        }
        let value = Tensor::scalar(super::dot(ta.data(), tb.data()));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Dot(a, b), rg))
    }

    /// L2 norm over all entries.
    pub fn norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(super::l2(self.value(a).data()));
        let rg = self.rg(a);
        self.push(value, Op::Norm(a), rg)
    }

    /// L2 norms along the last axis: `[.., D] -> [..]`.
    pub fn norm_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let Some((&d, outer)) = t.shape().split_last() else {
            return Err(TensorError::InvalidShape {
                op: "norm_last",
                shape: Vec::new(),
            });
        };
        let data = if d == 0 {
            vec![F::zero(); outer.iter().product()]
        } else {
            t.data().chunks(d).map(super::l2).collect()
        };
        let value = Tensor::new(outer.to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::NormLast(a), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut data = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    data[at(k)] = e;
                    total = total + e;
                }
                for k in 0..n {
                    data[at(k)] = data[at(k)] / total;
                }
            }
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().copied().sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = F::from_f64(t.len() as f64);
        let value = Tensor::scalar(t.data().iter().copied().sum::<F>() / n);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis {
                op: "sum_axis",
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + *s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::SumAxis(a, axis), rg))
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut extent = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let same_rank = s.len() == base.len();
            if !same_rank
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(mismatch("concat", &base, s));
            }
            extent += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                extent: n,
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Slice(a, axis, start), rg))
    }

    /// Selects entries along axis 0 (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let Some((&n, rest)) = t.shape().split_first() else {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: Vec::new(),
            });
        };
        let inner: usize = rest.iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: n,
                });
            }
            data.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor { shape, data },
            Op::GatherRows(a, indices.to_vec()),
            rg,
        ))
    }

    /// Applies a constant sparse row mixture to a rank-2 tensor.
    pub fn mix_rows(&mut self, a: Var, mix: Arc<SparseRows<F>>) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != mix.input_rows {
            return Err(mismatch("mix_rows", t.shape(), &[mix.input_rows]));
        }
        let cols = t.shape()[1];
        let mut data = vec![F::zero(); mix.rows.len() * cols];
        for (r, entries) in mix.rows.iter().enumerate() {
            let out = &mut data[r * cols..(r + 1) * cols];
            for &(c, w) in entries {
                for (o, x) in out.iter_mut().zip(t.row(c)) {
                    *o = *o + w * *x;
                }
            }
        }
        let value = Tensor {
            shape: vec![mix.rows.len(), cols],
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::MixRows(a, mix), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Stacks `n` copies of `a` along a new leading axis.
    pub fn repeat(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let data = t.data().repeat(n);
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Repeat(a, n), rg)
    }

    /// Multiplies every last-axis fiber of `a` (`[.., D]`) by the matching
    /// entry of `s` (`[..]`).
    pub fn scale_last(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (ta, ts) = (self.value(a), self.value(s));
        let Some((&d, outer)) = ta.shape().split_last() else {
            return Err(mismatch("scale_last", ta.shape(), ts.shape()));
        };
        if outer != ts.shape() {
            return Err(mismatch("scale_last", ta.shape(), ts.shape()));
        }
        let mut data = ta.data().to_vec();
        if d > 0 {
            for (fiber, f) in data.chunks_mut(d).zip(ts.data()) {
                fiber.iter_mut().for_each(|x| *x = *x * *f);
            }
        }
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::ScaleLast(a, s), rg))
    }

    /// Maximum along axis 0; ties resolve to the lowest index.
    pub fn max_axis0(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let Some((&n, rest)) = t.shape().split_first() else {
            return Err(TensorError::InvalidShape {
                op: "max_axis0",
                shape: Vec::new(),
            });
        };
        if n == 0 {
            return Err(TensorError::Empty { op: "max_axis0" });
        }
        let inner: usize = rest.iter().product();
        let mut arg = vec![0usize; inner];
        let mut data = t.data()[..inner].to_vec();
        for r in 1..n {
            for c in 0..inner {
                let x = t.data()[r * inner + c];
                if x > data[c] {
                    data[c] = x;
                    arg[c] = r;
                }
            }
        }
        let value = Tensor {
            shape: rest.to_vec(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaxAxis0(a, arg), rg))
    }

    /// Reverse sweep from a one-element `loss`. Parameters the loss does not
    /// depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Param | Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let grads = self
            .params
            .iter()
            .map(|p| {
                let shape = self.value(*p).shape().to_vec();
                match grads.get_mut(p.0).and_then(Option::take) {
                    Some(data) => Tensor { shape, data },
                    None => Tensor::zeros(&shape),
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, contrib: Vec<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(contrib)
                    .for_each(|(e, c)| *e = *e + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let zip_map = |x: &[F], y: &[F], f: &dyn Fn(F, F) -> F| -> Vec<F> {
            x.iter().zip(y).map(|(a, b)| f(*a, *b)).collect()
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -*x).collect());
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(g, val(*b), &|g, y| g * y));
                acc(*b, zip_map(g, val(*a), &|g, x| g * x));
            }
            Op::Div(a, b) => {
                acc(*a, zip_map(g, val(*b), &|g, y| g / y));
                let gb = g
                    .iter()
                    .zip(val(*a).iter().zip(val(*b)))
                    .map(|(g, (x, y))| -*g * *x / (*y * *y))
                    .collect();
                acc(*b, gb);
            }
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| *x * *c).collect()),
            Op::Tanh(a) => acc(
                *a,
                zip_map(g, node.value.data(), &|g, y| g * (F::one() - y * y)),
            ),
            Op::Relu(a) => acc(
                *a,
                zip_map(g, val(*a), &|g, x| {
                    if x > F::zero() {
                        g
                    } else {
                        F::zero()
                    }
                }),
            ),
            Op::Square(a) => {
                let two = F::from_f64(2.0);
                acc(*a, zip_map(g, val(*a), &|g, x| two * x * g));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                if self.rg(*a) {
                    let bt = transpose_raw(val(*b), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.rg(*b) {
                    let at = transpose_raw(val(*a), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::MatVec(a, x) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let xv = val(*x);
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(m * k);
                    for gi in g {
                        ga.extend(xv.iter().map(|xj| *gi * *xj));
                    }
                    acc(*a, ga);
                }
                if self.rg(*x) {
                    let av = val(*a);
                    let mut gx = vec![F::zero(); k];
                    for (i, gi) in g.iter().enumerate() {
                        for (j, o) in gx.iter_mut().enumerate() {
                            *o = *o + av[i * k + j] * *gi;
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (shape(*a)[0], shape(*a)[1]);
                acc(*a, transpose_raw(g, n, m));
            }
            Op::Dot(a, b) => {
                let g0 = g[0];
                acc(*a, val(*b).iter().map(|y| g0 * *y).collect());
                acc(*b, val(*a).iter().map(|x| g0 * *x).collect());
            }
            Op::Norm(a) => {
                let n = node.value.data()[0];
                let g0 = g[0];
                let contrib = if n > F::zero() {
                    val(*a).iter().map(|x| g0 * *x / n).collect()
                } else {
                    vec![F::zero(); val(*a).len()]
                };
                acc(*a, contrib);
            }
            Op::NormLast(a) => {
                let d = *shape(*a).last().expect("rank >= 1");
                let mut out = vec![F::zero(); val(*a).len()];
                if d > 0 {
                    let fibers = val(*a).chunks(d).zip(out.chunks_mut(d));
                    for ((x, o), (gn, n)) in fibers.zip(g.iter().zip(node.value.data())) {
                        if *n > F::zero() {
                            for (oi, xi) in o.iter_mut().zip(x) {
                                *oi = *gn * *xi / *n;
                            }
                        }
                    }
                }
                acc(*a, out);
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(shape(*a), *axis);
                let y = node.value.data();
                let mut out = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let s: F = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            out[at(k)] = y[at(k)] * (g[at(k)] - s);
                        }
                    }
                }
                acc(*a, out);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / F::from_f64(n as f64); n]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = axis_split(shape(*a), *axis);
                let mut out = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        out.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*a, out);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let extent = shape(*p)[*axis];
                    let mut out = Vec::with_capacity(outer * extent * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        out.extend_from_slice(&g[from..from + extent * inner]);
                    }
                    offset += extent;
                    acc(*p, out);
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, n, inner) = axis_split(shape(*a), *axis);
                let len = node.value.shape()[*axis];
                let mut out = vec![F::zero(); val(*a).len()];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let from = o * len * inner;
                    out[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                acc(*a, out);
            }
            Op::GatherRows(a, indices) => {
                let inner: usize = shape(*a)[1..].iter().product();
                let mut out = vec![F::zero(); val(*a).len()];
                for (r, &i) in indices.iter().enumerate() {
                    let src = &g[r * inner..(r + 1) * inner];
                    for (o, s) in out[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                        *o = *o + *s;
                    }
                }
                acc(*a, out);
            }
            Op::MixRows(a, mix) => {
                let cols = shape(*a)[1];
                let mut out = vec![F::zero(); val(*a).len()];
                for (r, entries) in mix.rows.iter().enumerate() {
                    let src = &g[r * cols..(r + 1) * cols];
                    for &(c, w) in entries {
                        for (o, s) in out[c * cols..(c + 1) * cols].iter_mut().zip(src) {
                            *o = *o + w * *s;
                        }
                    }
                }
                acc(*a, out);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Repeat(a, n) => {
                let inner = val(*a).len();
                let mut out = vec![F::zero(); inner];
                for k in 0..*n {
                    for (o, s) in out.iter_mut().zip(&g[k * inner..(k + 1) * inner]) {
                        *o = *o + *s;
                    }
                }
                acc(*a, out);
            }
            Op::ScaleLast(a, s) => {
                let d = *shape(*a).last().expect("rank >= 1");
                let sv = val(*s);
                if self.rg(*a) {
                    let mut ga = g.to_vec();
                    if d > 0 {
                        for (fiber, f) in ga.chunks_mut(d).zip(sv) {
                            fiber.iter_mut().for_each(|x| *x = *x * *f);
                        }
                    }
                    acc(*a, ga);
                }
                if self.rg(*s) {
                    let gs = if d > 0 {
                        g.chunks(d)
                            .zip(val(*a).chunks(d))
                            .map(|(gf, af)| super::dot(gf, af))
                            .collect()
                    } else {
                        vec![F::zero(); sv.len()]
                    };
                    acc(*s, gs);
                }
            }
            Op::MaxAxis0(a, arg) => {
                let inner = arg.len();
                let mut out = vec![F::zero(); val(*a).len()];
                for (c, &r) in arg.iter().enumerate() {
                    out[r * inner + c] = g[c];
                }
                acc(*a, out);
            }
        }
    }
}

fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == F::zero() {
                continue;
            }
            for (o, y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + x * *y;
            }
        }
    }
    out
}

fn transpose_raw<F: Real>(a: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tanh_at_origin_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0f64));
        let y = g.tanh(x);
        assert_eq!(g.value(y).item().unwrap(), 0.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0f64; 3]));
        let y = g.softmax(x, 0).unwrap();
        for p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn norm_gradient_at_three_four() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0f64, 4.0]));
        let n = g.norm(x);
        let grads = g.backward(n).unwrap();
        let gx = grads.get(0).data();
        assert!((gx[0] - 0.6).abs() < 1e-12 && (gx[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn norm_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0f64, 0.0]));
        let n = g.norm(x);
        let grads = g.backward(n).unwrap();
        assert_eq!(grads.get(0).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = g.constant(Tensor::<f64>::zeros(&[2, 2]));
        match g.add(a, b).unwrap_err() {
            TensorError::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            e => panic!("unexpected {e}"),
        }
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.param(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(g.backward(a), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[5.0, 6.0, 7.0]));
        let _ = unused;
        let loss = g.sum(used);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(1), &Tensor::zeros(&[3]));
        assert_eq!(grads.get(0).data(), &[1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut g = Graph::new();
        let w = g.param(t(&[2, 2], &[0.1, -0.3, 0.7, 0.2]));
        let x = g.constant(t(&[2], &[1.5, -2.0]));
        let y = g.matvec(w, x).unwrap();
        let y = g.tanh(y);
        let loss = g.sum(y);
        assert_eq!(g.backward(loss).unwrap(), g.backward(loss).unwrap());
    }

    #[test]
    fn sum_of_matvec_gradient_is_outer_product() {
        let mut g = Graph::new();
        let w = g.param(t(&[2, 3], &[0.0; 6]));
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.matvec(w, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse_along_axis_one() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }

    #[test]
    fn max_axis0_picks_first_of_ties() {
        let mut g = Graph::new();
        let a = g.param(t(&[3, 2], &[1.0, 0.0, 1.0, 2.0, 0.5, 2.0]));
        let m = g.max_axis0(a).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 2.0]);
        let loss = g.sum(m);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn sparse_rows_rejects_out_of_range_columns() {
        assert!(SparseRows::new(vec![vec![(3, 1.0f64)]], 3).is_err());
    }
}
