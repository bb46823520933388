//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] table, which
//! can then be folded into the `grad` buffers of the leaf tensors.
//!
//! Broadcasting is limited to row-vector bias/gain operations
//! ([`Tape::add_row`], [`Tape::mul_row`]), per-row scaling
//! ([`Tape::mul_col`]) and scalar constants.

use crate::error::{Error, Result};
use crate::numeric::kernels;
use crate::numeric::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Gelu,
    Exp,
    Log,
    Softplus,
    Square,
    Sigmoid,
    Tanh,
    Recip,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Unary(Var, Unary),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    LogDetSpd {
        a: Var,
        inv: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorder for one forward pass. Not shared across threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (zeros when unreachable) into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        match self.wrt(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }
}

fn two_d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Shape(format!("{op} expects a matrix, got {s:?}"))),
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers `t` as a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        let ng = t.requires_grad();
        self.push(value, Op::Leaf, ng)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d(self.value(a), "matmul")?;
        let (k2, n) = two_d(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = two_d(self.value(a), "transpose")?;
        let out = kernels::transpose(self.value(a).data(), m, n);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), ng))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, data)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        r: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap();
        if self.value(r).numel() != cols {
            return Err(Error::dim(name, self.shape(a), self.shape(r)));
        }
        let rv = self.value(r).data().to_vec();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| {
                row.iter()
                    .zip(&rv)
                    .map(|(&x, &y)| f(x, y))
                    .collect::<Vec<_>>()
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(r);
        Ok(self.push(Tensor::new(&shape, data)?, op, ng))
    }

    /// Adds a row vector (length = last dimension) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row", |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row", |x, y| x * y, Op::MulRow(a, row))
    }

    /// Scales row `i` of matrix `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = two_d(self.value(a), "mul_col")?;
        if self.value(col).numel() != m {
            return Err(Error::dim("mul_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .zip(c)
            .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
            .collect();
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, data).unwrap(), Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x + c).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, data).unwrap(), Op::AddScalar(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => kernels::relu,
            Unary::Gelu => kernels::gelu,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Softplus => kernels::softplus,
            Unary::Square => |x| x * x,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Recip => f64::recip,
        };
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, data).unwrap(), Op::Unary(a, kind), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().unwrap();
        let data = kernels::softmax_rows(t.data(), cols);
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, data).unwrap(), Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().unwrap();
        let data = kernels::log_softmax_rows(t.data(), cols);
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, data).unwrap(), Op::LogSoftmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Parameter(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let cols = *self.shape(x).last().unwrap();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (y, xhat, inv_std) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = two_d(self.value(logits), "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                self.shape(logits),
                &[labels.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let data = self.value(logits).data();
        let logp = kernels::log_softmax_rows(data, k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -logp[i * k + l])
            .sum::<f64>()
            / n as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = two_d(self.value(a), "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::Shape(format!(
                "columns {start}..{} of {n}",
                start + len
            )));
        }
        let src = self.value(a).data();
        let data = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&[m, len], data)?,
            Op::SliceCols { a, start },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = two_d(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(Error::dim(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(&[m, n], data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = two_d(self.value(a), "slice_rows")?;
        if start + len > m || len == 0 {
            return Err(Error::Shape(format!(
                "rows {start}..{} of {m}",
                start + len
            )));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&[len, n], data)?,
            Op::SliceRows { a, start },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0])[1];
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = two_d(self.value(p), "concat_rows")?;
            if pn != n {
                return Err(Error::dim(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(&[m, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    /// `log det A` for a symmetric positive-definite matrix.
    pub fn logdet_spd(&mut self, a: Var) -> Result<Var> {
        let (m, n) = two_d(self.value(a), "logdet_spd")?;
        if m != n {
            return Err(Error::Shape(format!(
                "logdet_spd needs a square matrix, got {m}x{n}"
            )));
        }
        let mat = nalgebra::DMatrix::from_row_slice(m, n, self.value(a).data());
        let chol = nalgebra::Cholesky::new(mat)
            .ok_or_else(|| Error::Parameter("matrix is not positive definite".into()))?;
        let logdet = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let inv = chol.inverse();
        let inv: Vec<f64> = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| inv[(i, j)])
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(logdet), Op::LogDetSpd { a, inv }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &mut |buf| {
                    let d = kernels::matmul_nt(g, val(*b), m, n, k);
                    add_into(buf, &d);
                });
                acc(*b, &mut |buf| {
                    let d = kernels::matmul_tn(val(*a), g, m, k, n);
                    add_into(buf, &d);
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &mut |buf| add_into(buf, &kernels::transpose(g, n, m)));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, x)| *o -= x)
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |buf| {
                    for ((o, gi), bi) in buf.iter_mut().zip(g).zip(val(*b)) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, gi), ai) in buf.iter_mut().zip(g).zip(val(*a)) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                acc(*a, &mut |buf| {
                    for ((o, gi), bi) in buf.iter_mut().zip(g).zip(val(*b)) {
                        *o += gi / bi;
                    }
                });
                acc(*b, &mut |buf| {
                    for (((o, gi), ai), bi) in buf.iter_mut().zip(g).zip(val(*a)).zip(val(*b)) {
                        *o -= gi * ai / (bi * bi);
                    }
                });
            }
            Op::AddRow(a, r) => {
                let cols = self.value(*r).numel();
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*r, &mut |buf| {
                    for row in g.chunks(cols) {
                        add_into(buf, row);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let cols = self.value(*r).numel();
                let rv = val(*r);
                acc(*a, &mut |buf| {
                    for (bo, gr) in buf.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((o, gi), ri) in bo.iter_mut().zip(gr).zip(rv) {
                            *o += gi * ri;
                        }
                    }
                });
                acc(*r, &mut |buf| {
                    for (gr, ar) in g.chunks(cols).zip(val(*a).chunks(cols)) {
                        for ((o, gi), ai) in buf.iter_mut().zip(gr).zip(ar) {
                            *o += gi * ai;
                        }
                    }
                });
            }
            Op::MulCol(a, c) => {
                let n = self.shape(*a)[1];
                let cv = val(*c);
                acc(*a, &mut |buf| {
                    for ((bo, gr), s) in buf.chunks_mut(n).zip(g.chunks(n)).zip(cv) {
                        bo.iter_mut().zip(gr).for_each(|(o, gi)| *o += gi * s);
                    }
                });
                acc(*c, &mut |buf| {
                    for ((o, gr), ar) in buf.iter_mut().zip(g.chunks(n)).zip(val(*a).chunks(n)) {
                        *o += gr.iter().zip(ar).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * c)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |buf| add_into(buf, g)),
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Unary(a, kind) => {
                let x = val(*a);
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => kernels::gelu_grad(x[i]),
                            Unary::Exp => out[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Softplus => kernels::sigmoid(x[i]),
                            Unary::Square => 2.0 * x[i],
                            Unary::Sigmoid => out[i] * (1.0 - out[i]),
                            Unary::Tanh => 1.0 - out[i] * out[i],
                            Unary::Recip => -out[i] * out[i],
                        };
                        buf[i] += g[i] * d;
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = *self.shape(*a).last().unwrap();
                acc(*a, &mut |buf| {
                    for ((bo, gr), yr) in buf
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.chunks(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, gi), yi) in bo.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = *self.shape(*a).last().unwrap();
                acc(*a, &mut |buf| {
                    for ((bo, gr), lr) in buf
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.chunks(cols))
                    {
                        let gs: f64 = gr.iter().sum();
                        for ((o, gi), li) in bo.iter_mut().zip(gr).zip(lr) {
                            *o += gi - li.exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*gain).numel();
                let gv = val(*gain);
                acc(*x, &mut |buf| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            buf[r * cols + c] += is * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((o, gi), hi) in buf.iter_mut().zip(gr).zip(hr) {
                            *o += gi * hi;
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for gr in g.chunks(cols) {
                        add_into(buf, gr);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                acc(*logits, &mut |buf| {
                    for (i, &l) in labels.iter().enumerate() {
                        for c in 0..k {
                            let target = if c == l { 1.0 } else { 0.0 };
                            buf[i * k + c] += g[0] * (probs[i * k + c] - target) / n as f64;
                        }
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let n = self.shape(*a)[1];
                let len = node.value.shape()[1];
                acc(*a, &mut |buf| {
                    for (i, gr) in g.chunks(len).enumerate() {
                        add_into(&mut buf[i * n + start..i * n + start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    acc(p, &mut |buf| {
                        for (i, bo) in buf.chunks_mut(w).enumerate() {
                            add_into(bo, &g[i * n + offset..i * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { a, start } => {
                let n = self.shape(*a)[1];
                acc(*a, &mut |buf| {
                    add_into(&mut buf[start * n..start * n + g.len()], g)
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::LogDetSpd { a, inv } => {
                acc(*a, &mut |buf| {
                    buf.iter_mut().zip(inv).for_each(|(o, v)| *o += g[0] * v)
                });
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(o, x)| *o += x);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia).data(), &[1., 2., 3., 4.]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[2, 3]") && matches!(err, Error::Dimension { .. }),
            "{msg}"
        );
    }

    #[test]
    fn linear_map_gradient_is_outer_product_structure() {
        // loss = sum(x · W) ⇒ dW[i][j] = Σ_rows x[r][i]
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::zeros(&[3, 2]).with_grad());
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., -1., 0.5, 2.]));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap(), &[0., 0., 2.5, 2.5, 5., 5.]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let mut w = Tensor::filled(&[2], 3.0).with_grad();
        let wv = tape.leaf(&w);
        let c = tape.constant(Tensor::scalar(4.0));
        let _unused = tape.square(wv);
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        grads.accumulate_into(wv, &mut w);
        assert_eq!(w.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::zeros(&[2]).with_grad());
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let mut w = t(&[2], &[1.0, -2.0]).with_grad();
        let wv = tape.leaf(&w);
        let sq = tape.square(wv);
        let loss = tape.sum(sq);
        for _ in 0..2 {
            tape.backward(loss).unwrap().accumulate_into(wv, &mut w);
        }
        assert_eq!(w.grad().unwrap(), &[4.0, -8.0]);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.cross_entropy(l, &[0, 3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let g = tape.constant(Tensor::filled(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.layer_norm(x, g, b, 0.0),
            Err(Error::Parameter(_))
        ));
    }
}
