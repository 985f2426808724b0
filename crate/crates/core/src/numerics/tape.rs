//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its variables in creation
//! order, which is already a topological order of the dependency graph.
//! [`Tape::backward`] walks the records once in reverse and accumulates
//! vector-Jacobian products into per-node gradient buffers. The tape is built
//! fresh for each mini-batch; leaves may borrow parameter tensors so that
//! binding a model does not copy its tables.

use std::borrow::Cow;

use crate::error::{Error, Result};

use super::tensor::{check_same, matmul_nt, matmul_raw, matmul_tn, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Hadamard(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    RowSum(Var),
    Ste(Var),
    Gather { table: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize },
    Transpose(Var),
    NormalizeCols { input: Var, norms: Vec<T> },
    Logloss { logits: Var, labels: Vec<T> },
}

struct Node<'a, T: Scalar> {
    op: Op<T>,
    value: Cow<'a, Tensor<T>>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<'a, T: Scalar = f64> {
    nodes: Vec<Node<'a, T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Every op output is checked for NaN/Inf and the op fails with
    /// [`Error::NonFinite`] when one appears.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input that owns its value.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(Op::Leaf, Cow::Owned(value), true)
    }

    /// Differentiable input borrowed from the caller.
    pub fn leaf_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_raw(Op::Leaf, Cow::Borrowed(value), true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(Op::Leaf, Cow::Owned(value), false)
    }

    /// Input borrowed from the caller that never receives a gradient.
    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_raw(Op::Leaf, Cow::Borrowed(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn push_raw(&mut self, op: Op<T>, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op_name(&op).to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(op, Cow::Owned(value), requires_grad))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| Error::Rank {
            op,
            shape: self.value(v).shape().to_vec(),
        })
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(op, out, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(name, va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(op, out, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, data)?, &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "hadamard", Op::Hadamard(a, b), |x, y| x * y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, name: &'static str, mul: bool) -> Result<Var> {
        let (m, n) = self.dims(x, name)?;
        let (r, n2) = self.dims(row, name)?;
        if r != 1 || n != n2 {
            return Err(Error::Shape {
                op: name,
                lhs: vec![m, n],
                rhs: vec![r, n2],
            });
        }
        let rv = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(rv)
                    .map(move |(&a, &b)| if mul { a * b } else { a + b })
            })
            .collect();
        let op = if mul { Op::MulRow(x, row) } else { Op::AddRow(x, row) };
        self.push(op, Tensor::matrix(m, n, data)?, &[x, row])
    }

    /// `x + row` with the `1 × n` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "add_row", false)
    }

    /// `x ⊙ row` with the `1 × n` row broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "mul_row", true)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Forward `𝟙[x > 0]`, backward identity.
    pub fn ste_indicator(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Ste(x), |v| if v > T::zero() { T::one() } else { T::zero() })
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    /// Per-row sums: `m × n → m × 1`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x, "row_sum")?;
        let data = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        self.push(Op::RowSum(x), Tensor::column(data), &[x])
    }

    /// Rows of `table` selected by `index`: an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, index: Vec<usize>) -> Result<Var> {
        let (c, d) = self.dims(table, "gather_rows")?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in &index {
            if i >= c {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table".into(),
                    index: i,
                    size: c,
                });
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::matrix(index.len(), d, data)?;
        self.push(Op::Gather { table, index }, out, &[table])
    }

    /// Horizontal concatenation of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(m, total, data)?, parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).col_slice(start, end)?;
        self.push(Op::SliceCols { input: x, start }, out, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transposed()?;
        self.push(Op::Transpose(x), out, &[x])
    }

    /// Divides each column by its Euclidean norm. Fails on a zero column.
    pub fn normalize_cols(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "normalize_cols")?;
        let v = self.value(x).data();
        let mut norms = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                norms[j] += v[i * n + j] * v[i * n + j];
            }
        }
        for (j, nrm) in norms.iter_mut().enumerate() {
            *nrm = nrm.sqrt();
            if *nrm == T::zero() {
                return Err(Error::invalid(format!(
                    "normalize_cols: column {j} is zero, cosine undefined"
                )));
            }
        }
        let data = (0..m * n).map(|k| v[k] / norms[k % n]).collect();
        let out = Tensor::matrix(m, n, data)?;
        self.push(Op::NormalizeCols { input: x, norms }, out, &[x])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`, in the
    /// overflow-free form `softplus(z) − y·z`.
    pub fn logloss_with_logits(&mut self, logits: Var, labels: Vec<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() || labels.is_empty() {
            return Err(Error::Shape {
                op: "logloss_with_logits",
                lhs: z.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let n = T::of(labels.len() as f64);
        let total: T = z
            .data()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        self.push(Op::Logloss { logits, labels }, Tensor::scalar(total / n), &[logits])
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).shape()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        let mut send = |v: Var, t: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            accumulate(&mut grads[v.0], t)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                let da = matmul_nt(g.data(), val(*b).data(), m, n, k);
                let db = matmul_tn(val(*a).data(), g.data(), m, k, n);
                send(*a, Tensor::matrix(m, k, da)?)?;
                send(*b, Tensor::matrix(k, n, db)?)?;
            }
            Op::Hadamard(a, b) => {
                send(*a, elementwise(g, val(*b), |g, y| g * y))?;
                send(*b, elementwise(g, val(*a), |g, x| g * x))?;
            }
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.map(|x| -x))?;
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone())?;
                send(*row, Tensor::row(col_sums(g)?))?;
            }
            Op::MulRow(x, row) => {
                let r = val(*row).data();
                let n = r.len();
                let dx = g
                    .data()
                    .chunks(n.max(1))
                    .flat_map(|c| c.iter().zip(r).map(|(&g, &m)| g * m))
                    .collect();
                send(*x, Tensor::new(g.shape().to_vec(), dx)?)?;
                send(*row, Tensor::row(col_sums(&elementwise(g, val(*x), |g, x| g * x))?))?;
            }
            Op::Scale(x, c) => send(*x, g.map(|v| v * *c))?,
            Op::Sigmoid(x) => send(*x, elementwise(g, &node.value, |g, y| g * y * (T::one() - y)))?,
            Op::Relu(x) => send(
                *x,
                elementwise(g, val(*x), |g, x| if x > T::zero() { g } else { T::zero() }),
            )?,
            Op::Square(x) => send(*x, elementwise(g, val(*x), |g, x| g * (x + x)))?,
            Op::Sum(x) => send(*x, Tensor::full(val(*x).shape(), g.data()[0]))?,
            Op::RowSum(x) => {
                let (m, n) = val(*x).dims2()?;
                let data = (0..m * n).map(|k| g.data()[k / n]).collect();
                send(*x, Tensor::matrix(m, n, data)?)?;
            }
            Op::Ste(x) => send(*x, g.clone())?,
            Op::Gather { table, index } => {
                let (c, d) = val(*table).dims2()?;
                let mut dt = vec![T::zero(); c * d];
                for (r, &i) in index.iter().enumerate() {
                    let dst = &mut dt[i * d..(i + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                send(*table, Tensor::matrix(c, d, dt)?)?;
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(m * w);
                    for i in 0..m {
                        data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    send(p, Tensor::matrix(m, w, data)?)?;
                    offset += w;
                }
            }
            Op::SliceCols { input, start } => {
                let (m, n) = val(*input).dims2()?;
                let w = g.cols();
                let mut data = vec![T::zero(); m * n];
                for i in 0..m {
                    data[i * n + start..i * n + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                send(*input, Tensor::matrix(m, n, data)?)?;
            }
            Op::Transpose(x) => send(*x, g.transposed()?)?,
            Op::NormalizeCols { input, norms } => {
                // d/dv (v/|v|) applied to g: (g − u·(uᵀg)) / |v|, per column.
                let u = &node.value;
                let (m, n) = u.dims2()?;
                let mut dots = vec![T::zero(); n];
                for (urow, grow) in u.data().chunks(n).zip(g.data().chunks(n)) {
                    for ((d, &a), &b) in dots.iter_mut().zip(urow).zip(grow) {
                        *d += a * b;
                    }
                }
                let data = (0..m * n)
                    .map(|k| {
                        let j = k % n;
                        (g.data()[k] - u.data()[k] * dots[j]) / norms[j]
                    })
                    .collect();
                send(*input, Tensor::matrix(m, n, data)?)?;
            }
            Op::Logloss { logits, labels } => {
                let z = val(*logits);
                let scale = g.data()[0] / T::of(labels.len() as f64);
                let data = z
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                send(*logits, Tensor::new(z.shape().to_vec(), data)?)?;
            }
        }
        Ok(())
    }
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zeros when it does not influence the root.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(t),
        Some(acc) => {
            check_same("accumulate", acc.shape(), t.shape())?;
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += *b;
            }
        }
    }
    Ok(())
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes already checked")
}

fn col_sums<T: Scalar>(g: &Tensor<T>) -> Result<Vec<T>> {
    let (_, n) = g.dims2()?;
    let mut out = vec![T::zero(); n];
    for chunk in g.data().chunks(n.max(1)) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Ok(out)
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Hadamard(..) => "hadamard",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::Sigmoid(..) => "sigmoid",
        Op::Relu(..) => "relu",
        Op::Square(..) => "square",
        Op::Sum(..) => "sum",
        Op::RowSum(..) => "row_sum",
        Op::Ste(..) => "ste_indicator",
        Op::Gather { .. } => "gather_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::Transpose(..) => "transpose",
        Op::NormalizeCols { .. } => "normalize_cols",
        Op::Logloss { .. } => "logloss_with_logits",
    }
}
