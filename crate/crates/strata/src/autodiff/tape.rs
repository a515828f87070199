use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Square,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var),
    Matmul(Var, Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    BroadcastTo(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    CumprodExclusive(Var),
    Scale(Var, f64),
    StopGradient(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only reverse-mode computation graph.
///
/// Built per training step (define-by-run) and discarded afterwards. Node
/// construction records the operation and its forward value; [`Tape::backward`]
/// replays the tape in reverse. Single-threaded per instance; independent
/// tapes may live on separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Spec'd primitive operation names accepted by [`Tape::forward_op`].
pub const PRIMITIVE_KINDS: &[&str] = &[
    "matmul",
    "add",
    "multiply",
    "subtract",
    "relu",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "sin",
    "cos",
    "sum",
    "mean",
    "square",
    "sqrt",
    "broadcast",
    "concat",
    "gather-rows",
    "stop-gradient",
];

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Record a non-trainable input. Constants never receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(id)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── elementwise / binary ────────────────────────────────────────────

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (asv, bsv) = (self.value(a).shape(), self.value(b).shape());
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "subtract",
            BinaryKind::Mul => "multiply",
        };
        let out_shape = kernels::broadcast_shape(asv, bsv)
            .ok_or_else(|| Error::shape_mismatch(name, asv, bsv))?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let data = kernels::broadcast_apply(
            self.value(a).data(),
            asv,
            self.value(b).data(),
            bsv,
            &out_shape,
            f,
        );
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(out_shape, data).expect("broadcast shape/data agree");
        Ok(self.push(Op::Binary(kind, a, b), value, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Relu => |x| if x > 0.0 { x } else { 0.0 },
            UnaryKind::Softplus => softplus,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Sin => f64::sin,
            UnaryKind::Cos => f64::cos,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Square => |x| x * x,
            UnaryKind::Neg => |x| -x,
        };
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(Op::Unary(kind, a), value, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Cos, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    /// Elementwise multiply by a plain constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let needs = self.needs(a);
        self.push(Op::Scale(a, k), value, needs)
    }

    /// Value-identical tensor whose backward contribution is zero.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(Op::StopGradient(a), value, false)
    }

    // ── contractions / reductions ───────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asv, bsv) = (self.value(a).shape(), self.value(b).shape());
        if asv.len() != 2 || bsv.len() != 2 || asv[1] != bsv[0] {
            return Err(Error::shape_mismatch("matmul", asv, bsv));
        }
        let (m, k, n) = (asv[0], asv[1], bsv[1]);
        let data = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![m, n], data).expect("matmul output shape");
        Ok(self.push(Op::Matmul(a, b), value, needs))
    }

    /// Sum of all elements, as a scalar (shape `[]`).
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), needs)
    }

    /// Mean of all elements, as a scalar (shape `[]`).
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Op::Mean(a), Tensor::scalar(s / n as f64), needs)
    }

    /// Per-row sum of a rank-2 tensor: `[r, c] -> [r]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        if shape.len() != 2 {
            return Err(Error::shape_mismatch("row-sum", shape, &[]));
        }
        let (r, c) = (shape[0], shape[1]);
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(c)
            .map(|row| row.iter().sum())
            .collect();
        let needs = self.needs(a);
        let value = Tensor::new(vec![r], data).expect("row-sum output shape");
        Ok(self.push(Op::RowSum(a), value, needs))
    }

    // ── structural ──────────────────────────────────────────────────────

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let asv = self.value(a).shape();
        match kernels::broadcast_shape(asv, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape_mismatch("broadcast", asv, shape)),
        }
        let zeros = Tensor::zeros(shape);
        let data = kernels::broadcast_apply(
            self.value(a).data(),
            asv,
            zeros.data(),
            shape,
            shape,
            |x, _| x,
        );
        let needs = self.needs(a);
        let value = Tensor::new(shape.to_vec(), data).expect("broadcast output shape");
        Ok(self.push(Op::BroadcastTo(a), value, needs))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let rows = {
            let s = self.value(parts[0]).shape();
            if s.len() != 2 {
                return Err(Error::shape_mismatch("concat", s, &[]));
            }
            s[0]
        };
        let mut cols = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape_mismatch(
                    "concat",
                    self.value(parts[0]).shape(),
                    s,
                ));
            }
            cols += s[1];
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0usize;
        for &p in parts {
            let pc = self.value(p).shape()[1];
            let pdata = self.value(p).data();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&pdata[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(vec![rows, cols], data).expect("concat output shape");
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, needs))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.value(a).shape();
        if shape.len() != 2 || start >= end || end > shape[1] {
            return Err(Error::invalid(format!(
                "slice columns {start}..{end} of shape {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        let src = self.value(a).data();
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let needs = self.needs(a);
        let value = Tensor::new(vec![rows, w], data).expect("slice output shape");
        Ok(self.push(Op::SliceCols(a, start, end), value, needs))
    }

    /// Rows of a rank-2 tensor selected by index; backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.value(a).shape();
        if shape.len() != 2 {
            return Err(Error::shape_mismatch("gather-rows", shape, &[indices.len()]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather-rows index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(a);
        let value = Tensor::new(vec![indices.len(), cols], data).expect("gather output shape");
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), value, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), value, needs))
    }

    /// Per-row exclusive running product of a rank-2 tensor:
    /// `y[r, 0] = 1`, `y[r, j] = prod(x[r, ..j])`.
    pub fn cumprod_exclusive(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        if shape.len() != 2 {
            return Err(Error::shape_mismatch("cumprod-exclusive", shape, &[]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut acc = 1.0;
            for j in 0..cols {
                data[r * cols + j] = acc;
                acc *= src[r * cols + j];
            }
        }
        let needs = self.needs(a);
        let value = Tensor::new(vec![rows, cols], data).expect("cumprod output shape");
        Ok(self.push(Op::CumprodExclusive(a), value, needs))
    }

    // ── dynamic dispatch ────────────────────────────────────────────────

    /// Record an operation by kind name.
    ///
    /// `broadcast` reads its target shape from a second tensor; `gather-rows`
    /// reads indices from a second tensor of non-negative integers.
    pub fn forward_op(&mut self, kind: &str, inputs: &[Var]) -> Result<Var> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "op `{kind}` expects {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            "matmul" => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            "add" => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            "multiply" => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            "subtract" => {
                want(2)?;
                self.sub(inputs[0], inputs[1])
            }
            "relu" => {
                want(1)?;
                Ok(self.relu(inputs[0]))
            }
            "softplus" => {
                want(1)?;
                Ok(self.softplus(inputs[0]))
            }
            "sigmoid" => {
                want(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            "exp" => {
                want(1)?;
                Ok(self.exp(inputs[0]))
            }
            "log" => {
                want(1)?;
                Ok(self.log(inputs[0]))
            }
            "sin" => {
                want(1)?;
                Ok(self.sin(inputs[0]))
            }
            "cos" => {
                want(1)?;
                Ok(self.cos(inputs[0]))
            }
            "sum" => {
                want(1)?;
                Ok(self.sum(inputs[0]))
            }
            "mean" => {
                want(1)?;
                Ok(self.mean(inputs[0]))
            }
            "square" => {
                want(1)?;
                Ok(self.square(inputs[0]))
            }
            "sqrt" => {
                want(1)?;
                Ok(self.sqrt(inputs[0]))
            }
            "broadcast" => {
                want(2)?;
                let shape = self.value(inputs[1]).shape().to_vec();
                self.broadcast_to(inputs[0], &shape)
            }
            "concat" => {
                if inputs.len() < 2 {
                    return Err(Error::invalid("concat expects at least 2 inputs"));
                }
                self.concat_cols(inputs)
            }
            "gather-rows" => {
                want(2)?;
                let idx: Vec<usize> = self
                    .value(inputs[1])
                    .data()
                    .iter()
                    .map(|&v| v as usize)
                    .collect();
                self.gather_rows(inputs[0], &idx)
            }
            "stop-gradient" => {
                want(1)?;
                Ok(self.stop_gradient(inputs[0]))
            }
            other => Err(Error::UnknownOp(other.to_string())),
        }
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a one-element root.
    ///
    /// Returns a gradient for every node that influences the root through a
    /// differentiable path; nodes without one read back as zero.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.backward_inner(root, false)
    }

    /// Like [`Tape::backward`] but skips branches with no trainable leaf,
    /// which is substantially cheaper on training graphs where encodings are
    /// large constants.
    pub fn backward_params(&self, root: Var) -> Result<Gradients> {
        self.backward_inner(root, true)
    }

    fn backward_inner(&self, root: Var, pruned: bool) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_value.shape()));

        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads, pruned);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        target: Var,
        pruned: bool,
        update: impl FnOnce(&mut Tensor),
    ) {
        if pruned && !self.needs(target) {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(target).shape()));
        }
        update(slot.as_mut().expect("gradient slot just initialized"));
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>], pruned: bool) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let y = &node.value;
                self.accumulate(grads, *a, pruned, |acc| {
                    let acc = acc.data_mut();
                    let gd = g.data();
                    let xd = x.data();
                    let yd = y.data();
                    match kind {
                        UnaryKind::Relu => {
                            for i in 0..gd.len() {
                                if xd[i] > 0.0 {
                                    acc[i] += gd[i];
                                }
                            }
                        }
                        UnaryKind::Softplus => {
                            for i in 0..gd.len() {
                                acc[i] += gd[i] * sigmoid(xd[i]);
                            }
                        }
                        UnaryKind::Sigmoid => {
                            for i in 0..gd.len() {
                                acc[i] += gd[i] * yd[i] * (1.0 - yd[i]);
                            }
                        }
                        UnaryKind::Exp => {
                            for i in 0..gd.len() {
                                acc[i] += gd[i] * yd[i];
                            }
                        }
                        UnaryKind::Log => {
                            for i in 0..gd.len() {
                                acc[i] += gd[i] / xd[i];
                            }
                        }
                        UnaryKind::Sin => {
                            for i in 0..gd.len() {
                                acc[i] += gd[i] * xd[i].cos();
                            }
                        }
                        UnaryKind::Cos => {
                            for i in 0..gd.len() {
                                acc[i] -= gd[i] * xd[i].sin();
                            }
                        }
                        UnaryKind::Sqrt => {
                            for i in 0..gd.len() {
                                acc[i] += gd[i] / (2.0 * yd[i]);
                            }
                        }
                        UnaryKind::Square => {
                            for i in 0..gd.len() {
                                acc[i] += 2.0 * xd[i] * gd[i];
                            }
                        }
                        UnaryKind::Neg => {
                            for i in 0..gd.len() {
                                acc[i] -= gd[i];
                            }
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                match kind {
                    BinaryKind::Add => {
                        self.accumulate(grads, a, pruned, |acc| {
                            let shape = self.value(a).shape();
                            let gd = g.data();
                            kernels::reduce_into(acc.data_mut(), shape, g.shape(), |i| gd[i]);
                        });
                        self.accumulate(grads, b, pruned, |acc| {
                            let shape = self.value(b).shape();
                            let gd = g.data();
                            kernels::reduce_into(acc.data_mut(), shape, g.shape(), |i| gd[i]);
                        });
                    }
                    BinaryKind::Sub => {
                        self.accumulate(grads, a, pruned, |acc| {
                            let shape = self.value(a).shape();
                            let gd = g.data();
                            kernels::reduce_into(acc.data_mut(), shape, g.shape(), |i| gd[i]);
                        });
                        self.accumulate(grads, b, pruned, |acc| {
                            let shape = self.value(b).shape();
                            let gd = g.data();
                            kernels::reduce_into(acc.data_mut(), shape, g.shape(), |i| -gd[i]);
                        });
                    }
                    BinaryKind::Mul => {
                        self.backward_mul(grads, a, b, g, pruned);
                        self.backward_mul(grads, b, a, g, pruned);
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.value(a).shape();
                    (s[0], s[1])
                };
                let n = self.value(b).shape()[1];
                self.accumulate(grads, a, pruned, |acc| {
                    // dA = g * B^T
                    let da = kernels::matmul_nt(g.data(), self.value(b).data(), m, n, k);
                    for (av, dv) in acc.data_mut().iter_mut().zip(&da) {
                        *av += dv;
                    }
                });
                self.accumulate(grads, b, pruned, |acc| {
                    // dB = A^T * g
                    let db = kernels::matmul_tn(self.value(a).data(), g.data(), m, k, n);
                    for (bv, dv) in acc.data_mut().iter_mut().zip(&db) {
                        *bv += dv;
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, pruned, |acc| {
                    for v in acc.data_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1) as f64;
                let gv = g.item() / n;
                self.accumulate(grads, *a, pruned, |acc| {
                    for v in acc.data_mut() {
                        *v += gv;
                    }
                });
            }
            Op::RowSum(a) => {
                let cols = self.value(*a).shape()[1];
                self.accumulate(grads, *a, pruned, |acc| {
                    let gd = g.data();
                    for (r, row) in acc.data_mut().chunks_mut(cols).enumerate() {
                        for v in row {
                            *v += gd[r];
                        }
                    }
                });
            }
            Op::BroadcastTo(a) => {
                self.accumulate(grads, *a, pruned, |acc| {
                    let shape = self.value(*a).shape();
                    let gd = g.data();
                    kernels::reduce_into(acc.data_mut(), shape, g.shape(), |i| gd[i]);
                });
            }
            Op::ConcatCols(parts) => {
                let cols = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0usize;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    self.accumulate(grads, p, pruned, |acc| {
                        let gd = g.data();
                        let ad = acc.data_mut();
                        for r in 0..rows {
                            for j in 0..pc {
                                ad[r * pc + j] += gd[r * cols + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceCols(a, start, _end) => {
                let cols = self.value(*a).shape()[1];
                let w = node.value.shape()[1];
                let rows = node.value.shape()[0];
                self.accumulate(grads, *a, pruned, |acc| {
                    let gd = g.data();
                    let ad = acc.data_mut();
                    for r in 0..rows {
                        for j in 0..w {
                            ad[r * cols + start + j] += gd[r * w + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let cols = self.value(*a).shape()[1];
                self.accumulate(grads, *a, pruned, |acc| {
                    let gd = g.data();
                    let ad = acc.data_mut();
                    // scatter-add; repeated indices accumulate
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..cols {
                            ad[i * cols + j] += gd[r * cols + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, pruned, |acc| {
                    for (av, gv) in acc.data_mut().iter_mut().zip(g.data()) {
                        *av += gv;
                    }
                });
            }
            Op::CumprodExclusive(a) => {
                let shape = self.value(*a).shape();
                let (rows, cols) = (shape[0], shape[1]);
                let x = self.value(*a).data();
                let y = node.value.data();
                self.accumulate(grads, *a, pruned, |acc| {
                    let gd = g.data();
                    let ad = acc.data_mut();
                    // dL/dx[k] = sum_{i>k} g[i] * prod_{j<i, j!=k} x[j];
                    // quadratic per row but safe when x contains zeros.
                    for r in 0..rows {
                        let xr = &x[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let ar = &mut ad[r * cols..(r + 1) * cols];
                        for k in 0..cols {
                            let mut m = yr[k];
                            let mut s = 0.0;
                            for i in (k + 1)..cols {
                                s += gr[i] * m;
                                m *= xr[i];
                            }
                            ar[k] += s;
                        }
                    }
                });
            }
            Op::Scale(a, kf) => {
                let kf = *kf;
                self.accumulate(grads, *a, pruned, |acc| {
                    for (av, gv) in acc.data_mut().iter_mut().zip(g.data()) {
                        *av += kf * gv;
                    }
                });
            }
        }
    }

    fn backward_mul(
        &self,
        grads: &mut [Option<Tensor>],
        target: Var,
        other: Var,
        g: &Tensor,
        pruned: bool,
    ) {
        if pruned && !self.needs(target) {
            return;
        }
        let tshape = self.value(target).shape().to_vec();
        let oval = self.value(other);
        self.accumulate(grads, target, pruned, |acc| {
            let gd = g.data();
            let od = oval.data();
            if oval.shape() == g.shape() {
                kernels::reduce_into(acc.data_mut(), &tshape, g.shape(), |i| gd[i] * od[i]);
            } else if od.len() == 1 {
                let o = od[0];
                kernels::reduce_into(acc.data_mut(), &tshape, g.shape(), |i| gd[i] * o);
            } else {
                // other is broadcast against g: expand via strided lookup
                let rank = g.shape().len();
                let op = kernels::pad_shape(oval.shape(), rank);
                let ostr = kernels::broadcast_strides(&op);
                let gshape = g.shape().to_vec();
                kernels::reduce_into(acc.data_mut(), &tshape, &gshape, |i| {
                    let mut rem = i;
                    let mut oi = 0usize;
                    for d in (0..rank).rev() {
                        let c = rem % gshape[d];
                        rem /= gshape[d];
                        oi += c * ostr[d];
                    }
                    gd[i] * od[oi]
                });
            }
        });
    }
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the root with respect to `v`; nodes the root does not
    /// depend on read as zero.
    pub fn grad(&self, v: Var, tape: &Tape) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn square_forward() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.square(x);
        assert_eq!(t.value(y).item(), 9.0);
    }

    #[test]
    fn softplus_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.softplus(x);
        assert!(close(t.value(y).item(), std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn stop_gradient_contract() {
        // stop_gradient(x) * x at x=2: forward 4, d/dx = 2
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let sg = t.stop_gradient(x);
        let y = t.mul(sg, x).unwrap();
        assert_eq!(t.value(y).item(), 4.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.grad(x, &t).item(), 2.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let root = t.sum(sq);
        let g = t.backward(root).unwrap();
        assert_eq!(g.grad(x, &t).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn matmul_gradient_ones() {
        let mut t = Tape::new();
        let a = t.param(Tensor::ones(&[2, 3]));
        let b = t.param(Tensor::ones(&[3, 2]));
        let c = t.matmul(a, b).unwrap();
        let root = t.sum(c);
        let g = t.backward(root).unwrap();
        assert_eq!(g.grad(a, &t).data(), &[2.0; 6]);
        assert_eq!(g.grad(b, &t).data(), &[2.0; 6]);
    }

    #[test]
    fn mse_at_minimum_has_zero_gradient() {
        let mut t = Tape::new();
        let y = t.param(Tensor::vector(&[0.5, -1.5, 2.0]));
        let target = t.constant(Tensor::vector(&[0.5, -1.5, 2.0]));
        let d = t.sub(y, target).unwrap();
        let sq = t.square(d);
        let root = t.mean(sq);
        let g = t.backward(root).unwrap();
        assert_eq!(g.grad(y, &t).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn root_grad_is_ones() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(5.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.grad(y, &t).data(), &[1.0]);
    }

    #[test]
    fn unreachable_nodes_read_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.0));
        let unrelated = t.param(Tensor::vector(&[1.0, 2.0]));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert!(g.get(unrelated).is_none());
        assert_eq!(g.grad(unrelated, &t).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.param(Tensor::ones(&[2, 3]));
        let b = t.param(Tensor::ones(&[4, 2]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn unknown_op_kind_rejected() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(1.0));
        assert!(matches!(
            t.forward_op("convolve", &[a]),
            Err(crate::error::Error::UnknownOp(_))
        ));
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        // grad(a*f + b*g) == a*grad f + b*grad g
        let xs = [0.3, -1.2, 2.4, 0.9];
        let (a, b) = (1.7, -0.6);

        let build = |t: &mut Tape, x: Var| {
            let f = {
                let s = t.sin(x);
                t.sum(s)
            };
            let g = {
                let sq = t.square(x);
                t.sum(sq)
            };
            (f, g)
        };

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&xs));
        let (f, g) = build(&mut t, x);
        let fa = t.scale(f, a);
        let gb = t.scale(g, b);
        let combined = t.add(fa, gb).unwrap();
        let grad_combined = t.backward(combined).unwrap().grad(x, &t);

        let mut t2 = Tape::new();
        let x2 = t2.param(Tensor::vector(&xs));
        let (f2, g2) = build(&mut t2, x2);
        let gf = t2.backward(f2).unwrap().grad(x2, &t2);
        let gg = t2.backward(g2).unwrap().grad(x2, &t2);

        for i in 0..xs.len() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!(
                close(grad_combined.data()[i], expect, 1e-12),
                "linearity at {i}: {} vs {expect}",
                grad_combined.data()[i]
            );
        }
    }

    #[test]
    fn replacing_leaf_with_stop_gradient_zeroes_its_grad() {
        let xs = [0.4, 1.3, -0.7];
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&xs));
        let sg = t.stop_gradient(x);
        let sq = t.square(sg);
        let root = t.sum(sq);
        let g = t.backward(root).unwrap();
        assert_eq!(g.grad(x, &t).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut t = Tape::new();
            let x = t.param(Tensor::vector(&[0.123, -4.56, 7.89, 0.001]));
            let w = t.param(Tensor::matrix(4, 4, (0..16).map(|i| (i as f64) * 0.37 - 2.0).collect()).unwrap());
            let xm = t.reshape(x, &[1, 4]).unwrap();
            let h = t.matmul(xm, w).unwrap();
            let h = t.softplus(h);
            let root = {
                let s = t.sum(h);
                t.square(s)
            };
            let g = t.backward(root).unwrap();
            (
                t.value(root).item().to_bits(),
                g.grad(w, &t).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut t = Tape::new();
        let m = t.param(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let picked = t.gather_rows(m, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(picked).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let root = t.sum(picked);
        let g = t.backward(root).unwrap();
        // row 1 picked twice, row 0 once, row 2 never
        assert_eq!(g.grad(m, &t).data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn cumprod_exclusive_forward_and_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(1, 3, vec![2.0, 3.0, 4.0]).unwrap());
        let y = t.cumprod_exclusive(x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 6.0]);
        // root = sum(y) = 1 + x0 + x0*x1
        // d/dx0 = 1 + x1 = 4; d/dx1 = x0 = 2; d/dx2 = 0
        let root = t.sum(y);
        let g = t.backward(root).unwrap();
        assert_eq!(g.grad(x, &t).data(), &[4.0, 2.0, 0.0]);
    }

    #[test]
    fn cumprod_exclusive_grad_with_zero_entry() {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(1, 3, vec![0.0, 3.0, 4.0]).unwrap());
        let y = t.cumprod_exclusive(x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 0.0, 0.0]);
        let root = t.sum(y);
        let g = t.backward(root).unwrap();
        // same formulas, no NaN from division
        assert_eq!(g.grad(x, &t).data(), &[4.0, 0.0, 0.0]);
    }

    #[test]
    fn pruned_backward_matches_full_on_params() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[0.5, 1.5]));
        let c = t.constant(Tensor::vector(&[2.0, -1.0]));
        let prod = t.mul(x, c).unwrap();
        let root = t.sum(prod);
        let full = t.backward(root).unwrap();
        let pruned = t.backward_params(root).unwrap();
        assert_eq!(full.grad(x, &t).data(), pruned.grad(x, &t).data());
        // pruned skips the constant, full reports its gradient
        assert!(full.get(c).is_some());
        assert!(pruned.get(c).is_none());
    }
}
