//! Reverse-mode automatic differentiation over dense row-major `f64` tensors.
//!
//! A [`Graph`] records every primitive applied to its nodes. Node ids are
//! assigned in creation order, so parents always precede children and a
//! single reverse sweep over the id range is a valid reverse topological
//! order. Gradients are only propagated into nodes that require them; a
//! constant leaf (e.g. a frozen network parameter) still lets gradients pass
//! *through* the operations that consume it.
//!
//! Repeated calls to [`Graph::backward`] accumulate into the stored
//! gradients until [`Graph::zero_grad`] is called.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a `[rows, cols]` matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::InvalidTensor(format!(
                    "ragged rows: expected width {cols}, got {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a matrix (first dimension).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The primitive kinds supported by the graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Tanh,
    Relu,
    Sigmoid,
    Square,
    Abs,
    Ln,
    Clamp(f64, f64),
    Sum,
    Mean,
    Concat,
    Scale(f64),
    AddBias,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Square => "square",
            Primitive::Abs => "abs",
            Primitive::Ln => "ln",
            Primitive::Clamp(..) => "clamp",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Concat => "concat",
            Primitive::Scale(_) => "scale",
            Primitive::AddBias => "add_bias",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Abs(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Scale(Var, f64),
    AddBias(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph recording primitive applications.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Constant copy of `x`: same value, no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Accumulated gradient of `x`, if any backward pass reached it.
    pub fn grad(&self, x: Var) -> Option<&[f64]> {
        self.grads.get(x.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `x`; zeros when none was accumulated.
    pub fn grad_tensor(&self, x: Var) -> Tensor {
        let shape = self.nodes[x.0].value.shape.clone();
        match self.grad(x) {
            Some(g) => Tensor {
                shape,
                data: g.to_vec(),
            },
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(id)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Applies a primitive by kind. Unary kinds take one input, binary kinds
    /// two; `Concat` takes any number of matrices.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{} takes {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )))
            }
        };
        match kind {
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::AddBias => arity(2).and_then(|_| self.add_bias(inputs[0], inputs[1])),
            Primitive::Tanh => arity(1).map(|_| self.tanh(inputs[0])),
            Primitive::Relu => arity(1).map(|_| self.relu(inputs[0])),
            Primitive::Sigmoid => arity(1).map(|_| self.sigmoid(inputs[0])),
            Primitive::Square => arity(1).map(|_| self.square(inputs[0])),
            Primitive::Abs => arity(1).map(|_| self.abs(inputs[0])),
            Primitive::Ln => arity(1).and_then(|_| self.ln(inputs[0])),
            Primitive::Clamp(lo, hi) => arity(1).and_then(|_| self.clamp(inputs[0], lo, hi)),
            Primitive::Sum => arity(1).map(|_| self.sum(inputs[0])),
            Primitive::Mean => arity(1).map(|_| self.mean(inputs[0])),
            Primitive::Scale(c) => arity(1).map(|_| self.scale(inputs[0], c)),
            Primitive::Concat => self.concat(inputs),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = &self.nodes[a.0].value;
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&va.data, &vb.data, &mut out, m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a bias row (`[n]` or `[1, n]`) to every row of a `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let n = vb.data.len();
        let bias_ok = matches!(vb.shape.as_slice(), [c] if *c == n)
            || matches!(vb.shape.as_slice(), [1, c] if *c == n);
        if vx.shape.len() != 2 || !bias_ok || vx.shape[1] != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: vx.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let mut data = vx.data.clone();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&vb.data) {
                *v += b;
            }
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), f64::abs)
    }

    /// Natural log; every input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.data.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidArgument(format!("ln of non-positive value {bad}")));
        }
        Ok(self.map(x, Op::Ln(x), f64::ln))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        Ok(self.map(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.data.iter().sum::<f64>() / v.data.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    /// Concatenates 2-D matrices with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rows = self.nodes[first.0].value.shape.first().copied().unwrap_or(0);
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].value.shape;
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.nodes[first.0].value.shape.clone(),
                    right: s.clone(),
                });
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let value = Tensor {
            shape: vec![rows, total],
            data,
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Back-propagates from a scalar root, accumulating into stored gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape.clone()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        local[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = local[id].take() else { continue };
            self.propagate(id, &g, &mut local);
            let slot = &mut self.grads[id];
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let mut send = |target: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target.0].requires_grad {
                return;
            }
            let slot = &mut local[target.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; nodes[target.0].value.data.len()]);
            }
            f(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &mut |acc| axpy(acc, g, 1.0));
                send(*b, &mut |acc| axpy(acc, g, 1.0));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |acc| axpy(acc, g, 1.0));
                send(*b, &mut |acc| axpy(acc, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                send(*a, &mut |acc| {
                    for ((x, gi), y) in acc.iter_mut().zip(g).zip(vb) {
                        *x += gi * y;
                    }
                });
                send(*b, &mut |acc| {
                    for ((x, gi), y) in acc.iter_mut().zip(g).zip(va) {
                        *x += gi * y;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                // dA = dC · Bᵀ
                send(*a, &mut |acc| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &vb.data[p * n..(p + 1) * n];
                            acc[i * k + p] += dot(gi, bp);
                        }
                    }
                });
                // dB = Aᵀ · dC
                send(*b, &mut |acc| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = va.data[i * k + p];
                            if aip != 0.0 {
                                axpy(&mut acc[p * n..(p + 1) * n], gi, aip);
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, bias) => {
                send(*x, &mut |acc| axpy(acc, g, 1.0));
                let n = nodes[bias.0].value.data.len();
                send(*bias, &mut |acc| {
                    for row in g.chunks(n) {
                        axpy(acc, row, 1.0);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                send(*x, &mut |acc| {
                    for ((a, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                        *a += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                send(*x, &mut |acc| {
                    for ((a, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                        *a += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Relu(x) => {
                let v = &nodes[x.0].value.data;
                send(*x, &mut |acc| {
                    for ((a, gi), xi) in acc.iter_mut().zip(g).zip(v) {
                        if *xi > 0.0 {
                            *a += gi;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let v = &nodes[x.0].value.data;
                send(*x, &mut |acc| {
                    for ((a, gi), xi) in acc.iter_mut().zip(g).zip(v) {
                        *a += 2.0 * xi * gi;
                    }
                });
            }
            Op::Abs(x) => {
                let v = &nodes[x.0].value.data;
                send(*x, &mut |acc| {
                    for ((a, gi), xi) in acc.iter_mut().zip(g).zip(v) {
                        if *xi > 0.0 {
                            *a += gi;
                        } else if *xi < 0.0 {
                            *a -= gi;
                        }
                    }
                });
            }
            Op::Ln(x) => {
                let v = &nodes[x.0].value.data;
                send(*x, &mut |acc| {
                    for ((a, gi), xi) in acc.iter_mut().zip(g).zip(v) {
                        *a += gi / xi;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let v = &nodes[x.0].value.data;
                send(*x, &mut |acc| {
                    for ((a, gi), xi) in acc.iter_mut().zip(g).zip(v) {
                        if *xi >= *lo && *xi <= *hi {
                            *a += gi;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                send(*x, &mut |acc| acc.iter_mut().for_each(|a| *a += g0));
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.data.len() as f64;
                let g0 = g[0] / n;
                send(*x, &mut |acc| acc.iter_mut().for_each(|a| *a += g0));
            }
            Op::Scale(x, c) => {
                send(*x, &mut |acc| axpy(acc, g, *c));
            }
            Op::Concat(parts) => {
                let total = node.value.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape[1];
                    send(*p, &mut |acc| {
                        for (r, dst) in acc.chunks_mut(w).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            axpy(dst, src, 1.0);
                        }
                    });
                    offset += w;
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn axpy(acc: &mut [f64], x: &[f64], alpha: f64) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(row, &b[p * n..(p + 1) * n], aip);
            }
        }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - central| / max(1, |central|)`.
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates where the one-sided differences disagree (a kink lies
    /// within `eps`); excluded from `max_rel_error`.
    pub skipped: Vec<(usize, usize)>,
    /// Coordinates where the function was non-finite at a probe point.
    pub failures: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.max_rel_error <= tol
    }
}

/// Relative disagreement between one-sided differences beyond which a probe
/// is treated as straddling a kink.
const KINK_THRESHOLD: f64 = 1e-3;

/// Compares the analytic gradient of a scalar function against central
/// differences at `points`.
///
/// `f` receives fresh leaves for every point on every evaluation; it must
/// build its result only from those leaves and constants.
pub fn grad_check<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let f0 = g.value(root).item();
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad_tensor(*v)).collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor> = points.to_vec();
    for (ti, point) in points.iter().enumerate() {
        for ci in 0..point.len() {
            let x = point.data[ci];
            probe[ti].data[ci] = x + eps;
            let fp = eval(&probe)?;
            probe[ti].data[ci] = x - eps;
            let fm = eval(&probe)?;
            probe[ti].data[ci] = x;
            if !(fp.is_finite() && fm.is_finite() && f0.is_finite()) {
                report.failures.push((ti, ci));
                continue;
            }
            let central = (fp - fm) / (2.0 * eps);
            let fwd = (fp - f0) / eps;
            let bwd = (f0 - fm) / eps;
            let scale = central.abs().max(1.0);
            if (fwd - bwd).abs() > KINK_THRESHOLD * scale {
                report.skipped.push((ti, ci));
                continue;
            }
            let err = (analytic[ti].data[ci] - central).abs() / scale;
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, ci));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec1(xs: &[f64]) -> Tensor {
        Tensor::new(vec![xs.len()], xs.to_vec()).unwrap()
    }

    fn mat(rows: usize, cols: usize, xs: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], xs.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let mut g = Graph::new();
        let a = g.constant(mat(1, 2, &[1.0, 2.0]));
        let b = g.constant(mat(2, 1, &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn abs_value_and_subgradient() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[-3.5, 0.0, 2.0]));
        let y = g.abs(x);
        assert_eq!(g.value(y).data(), &[3.5, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, 2.0, 3.0]));
        let sq = g.square(x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_mean() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, -2.0, 3.0, 7.0]));
        let m = g.mean(x);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.tanh(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, 2.0]));
        let h = g.square(x);
        let y = g.sum(h);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 3, &[0.0; 6]));
        let b = g.constant(mat(2, 2, &[0.0; 4]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        let bias = g.constant(vec1(&[0.0; 2]));
        assert!(g.add_bias(a, bias).is_err());
    }

    #[test]
    fn constants_block_gradient_but_pass_through() {
        let mut g = Graph::new();
        let w = g.constant(mat(1, 1, &[3.0]));
        let x = g.param(mat(1, 1, &[2.0]));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn concat_and_bias_gradients() {
        let mut g = Graph::new();
        let a = g.param(mat(2, 1, &[1.0, 2.0]));
        let b = g.param(mat(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let bias = g.param(vec1(&[1.0, 0.0, -1.0]));
        let d = g.add_bias(c, bias).unwrap();
        let sq = g.square(d);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[4.0, 6.0]);
        assert_eq!(g.grad(b).unwrap(), &[6.0, 6.0, 10.0, 10.0]);
        assert_eq!(g.grad(bias).unwrap(), &[4.0 + 6.0, 6.0 + 10.0, 6.0 + 10.0]);
    }

    #[test]
    fn grad_check_square() {
        let r = grad_check(
            |g, v| {
                let y = g.square(v[0]);
                Ok(g.sum(y))
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert!(r.skipped.is_empty());
    }

    #[test]
    fn grad_check_flags_abs_kink() {
        let r = grad_check(
            |g, v| {
                let y = g.abs(v[0]);
                Ok(g.sum(y))
            },
            &[Tensor::scalar(0.0)],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.skipped, vec![(0, 0)]);
        assert_eq!(r.checked, 0);
    }

    #[test]
    fn grad_check_reports_non_finite_probe() {
        // Overflows to infinity at every probe.
        let r = grad_check(
            |g, v| {
                let y = g.scale(v[0], 1e308);
                let y = g.scale(y, 1e308);
                Ok(g.sum(y))
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.failures, vec![(0, 0)]);
        assert!(!r.passed(1.0));
    }

    #[test]
    fn linearity_of_backward() {
        let x0 = mat(2, 2, &[0.3, -0.7, 1.1, 0.2]);
        let loss_a = |g: &mut Graph, x: Var| {
            let t = g.tanh(x);
            g.sum(t)
        };
        let loss_b = |g: &mut Graph, x: Var| {
            let s = g.sigmoid(x);
            let q = g.square(s);
            g.mean(q)
        };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let a = loss_a(&mut g, x);
        let b = loss_b(&mut g, x);
        let total = g.add(a, b).unwrap();
        g.backward(total).unwrap();
        let joint = g.grad_tensor(x);

        let mut ga = Graph::new();
        let xa = ga.param(x0.clone());
        let ra = loss_a(&mut ga, xa);
        ga.backward(ra).unwrap();
        let mut gb = Graph::new();
        let xb = gb.param(x0);
        let rb = loss_b(&mut gb, xb);
        gb.backward(rb).unwrap();
        for ((j, a), b) in joint.data().iter().zip(ga.grad(xa).unwrap()).zip(gb.grad(xb).unwrap()) {
            assert!((j - (a + b)).abs() <= 1e-12);
        }
    }

    fn unary_kinds() -> Vec<Primitive> {
        vec![
            Primitive::Tanh,
            Primitive::Relu,
            Primitive::Sigmoid,
            Primitive::Square,
            Primitive::Abs,
            Primitive::Ln,
            Primitive::Clamp(-0.5, 0.5),
            Primitive::Sum,
            Primitive::Mean,
            Primitive::Scale(-1.7),
        ]
    }

    fn binary_kinds() -> Vec<Primitive> {
        vec![
            Primitive::Add,
            Primitive::Sub,
            Primitive::Mul,
            Primitive::MatMul,
            Primitive::AddBias,
            Primitive::Concat,
        ]
    }

    // Weighted sum so each output coordinate carries a distinct sensitivity.
    fn reduce(g: &mut Graph, y: Var) -> Result<Var> {
        let n = g.value(y).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
        let wv = g.constant(Tensor::new(g.value(y).shape().to_vec(), w)?);
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn every_primitive_matches_central_differences(
            xs in proptest::collection::vec(-2.0f64..2.0, 6),
            ys in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            // Stay away from the kinks of relu/abs/clamp and the ln domain edge.
            let away = |v: &f64| v.abs() > 1e-3 && (v.abs() - 0.5).abs() > 1e-3;
            prop_assume!(xs.iter().all(away) && ys.iter().all(away));
            for kind in unary_kinds() {
                let x = if kind == Primitive::Ln {
                    mat(2, 3, &xs.iter().map(|v| v.abs() + 0.1).collect::<Vec<_>>())
                } else {
                    mat(2, 3, &xs)
                };
                let r = grad_check(|g, v| {
                    let y = g.apply(kind, &[v[0]])?;
                    reduce(g, y)
                }, &[x], 1e-6).unwrap();
                prop_assert!(r.max_rel_error <= 1e-6, "{:?}: {:?}", kind, r);
            }
            for kind in binary_kinds() {
                let a = mat(2, 3, &xs);
                let b = match kind {
                    Primitive::MatMul => mat(3, 2, &ys),
                    Primitive::AddBias => vec1(&ys[..3]),
                    Primitive::Concat => mat(2, 3, &ys),
                    _ => mat(2, 3, &ys),
                };
                let r = grad_check(|g, v| {
                    let y = g.apply(kind, &[v[0], v[1]])?;
                    reduce(g, y)
                }, &[a, b], 1e-6).unwrap();
                prop_assert!(r.max_rel_error <= 1e-6, "{:?}: {:?}", kind, r);
            }
        }

        #[test]
        fn evaluation_is_bit_deterministic(xs in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let run = || {
                let mut g = Graph::new();
                let x = g.param(mat(2, 2, &xs));
                let w = g.constant(mat(2, 2, &[0.1, -0.4, 0.9, 0.3]));
                let h = g.matmul(x, w).unwrap();
                let t = g.tanh(h);
                let s = g.sigmoid(t);
                let m = g.mean(s);
                g.backward(m).unwrap();
                (g.value(m).item().to_bits(), g.grad_tensor(x).into_data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            };
            prop_assert_eq!(run(), run());
        }
    }
}
