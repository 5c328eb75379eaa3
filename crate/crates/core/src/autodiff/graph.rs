//! Tape of recorded operations and its reverse sweep.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and the backward pass is a single reverse scan.

use std::rc::Rc;

use super::kernels::{col2im, gemm, gemm_nt, im2col, transpose};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of an elementwise binary op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[1, n]` or `[n]` against `[m, n]`.
    Row,
    /// `[m, 1]` against `[m, n]`.
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Batch normalization mode.
#[derive(Clone, Debug, PartialEq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize with stored running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64>, eps: f64 },
}

/// Operation selector for [`Graph::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Relu,
    Exp,
    Log,
    SoftmaxRows,
    L2NormalizeRows,
    ConcatCols,
    ConcatRows,
    SliceRows {
        start: usize,
        len: usize,
    },
    SliceCols {
        start: usize,
        len: usize,
    },
    Transpose,
    MeanAll,
    SumAll,
    SumRows,
    /// Inputs: `x, gamma, beta`.
    BatchNorm(BnMode),
    /// Inputs: `x, weight, bias`.
    Conv2d,
    AvgPool2,
    GlobalAvgPool,
    /// Row-wise log-sum-exp over entries whose mask bit is set.
    LogSumExpRows(Option<Rc<[bool]>>),
    /// Picks one column per row.
    GatherCols(Vec<usize>),
}

enum Record<S> {
    Leaf,
    MatMul(Var, Var),
    Binary {
        kind: Binary,
        lhs: Var,
        rhs: Var,
        bcast: Bcast,
    },
    ScalarMul(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    L2Normalize {
        x: Var,
        inv_norms: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    MeanAll(Var),
    SumAll(Var),
    SumRows(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<f64>,
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
        channels: usize,
        spatial: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<S>,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    LogSumExp {
        x: Var,
        weights: Vec<f64>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    record: Record<S>,
    requires_grad: bool,
}

/// Summary of one backward sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardReport {
    pub visited: usize,
}

/// A computation graph. One graph per forward/backward cycle.
pub struct Graph<S: Real = f32> {
    nodes: Vec<Node<S>>,
    degenerate_rows: usize,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            degenerate_rows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of all-zero rows seen by `l2_normalize_rows`.
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    /// Adds a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            record: Record::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.nodes[v.0].value.take_grad()
    }

    /// The batch mean and (biased) variance used by a train-mode batchnorm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].record {
            Record::BatchNorm {
                batch_stats: Some((m, var)),
                ..
            } => Some((m, var)),
            _ => None,
        }
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: &[usize],
        data: Vec<S>,
        record: Record<S>,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            record,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a matrix, got {other:?}"))),
        }
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize)> {
        match self.shape(v) {
            [b, c, h, w] => Ok((*b, *c, *h, *w)),
            other => Err(Error::shape(op, format!("expected [b, c, h, w], got {other:?}"))),
        }
    }

    /// Dispatches on `kind`. Equivalent to calling the named method directly.
    pub fn forward_op(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape(
                    "forward_op",
                    format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                ))
            }
        };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::ScalarMul(c) => arity(1).and_then(|_| self.scalar_mul(inputs[0], *c)),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            OpKind::Log => arity(1).and_then(|_| self.log(inputs[0])),
            OpKind::SoftmaxRows => arity(1).and_then(|_| self.softmax_rows(inputs[0])),
            OpKind::L2NormalizeRows => arity(1).and_then(|_| self.l2_normalize_rows(inputs[0])),
            OpKind::ConcatCols => self.concat_cols(inputs),
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::SliceRows { start, len } => arity(1).and_then(|_| self.slice_rows(inputs[0], *start, *len)),
            OpKind::SliceCols { start, len } => arity(1).and_then(|_| self.slice_cols(inputs[0], *start, *len)),
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::MeanAll => arity(1).and_then(|_| self.mean_all(inputs[0])),
            OpKind::SumAll => arity(1).and_then(|_| self.sum_all(inputs[0])),
            OpKind::SumRows => arity(1).and_then(|_| self.sum_rows(inputs[0])),
            OpKind::BatchNorm(mode) => arity(3).and_then(|_| self.batchnorm(inputs[0], inputs[1], inputs[2], mode)),
            OpKind::Conv2d => arity(3).and_then(|_| self.conv2d(inputs[0], inputs[1], inputs[2])),
            OpKind::AvgPool2 => arity(1).and_then(|_| self.avg_pool2(inputs[0])),
            OpKind::GlobalAvgPool => arity(1).and_then(|_| self.global_avg_pool(inputs[0])),
            OpKind::LogSumExpRows(mask) => arity(1).and_then(|_| self.logsumexp_rows(inputs[0], mask.as_deref())),
            OpKind::GatherCols(idx) => arity(1).and_then(|_| self.gather_cols(inputs[0], idx)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let out = gemm(self.data(a), self.data(b), m, k, n);
        self.push("matmul", &[m, n], out, Record::MatMul(a, b), &[a, b])
    }

    fn bcast(&self, op: &'static str, lhs: Var, rhs: Var) -> Result<Bcast> {
        let ls = self.shape(lhs);
        let rs = self.shape(rhs);
        if ls == rs {
            return Ok(Bcast::Same);
        }
        let rn: usize = rs.iter().product();
        if rn == 1 {
            return Ok(Bcast::Scalar);
        }
        if let [m, n] = ls {
            match rs {
                [1, c] | [c] if c == n => return Ok(Bcast::Row),
                [r, 1] if r == m => return Ok(Bcast::Col),
                _ => {}
            }
        }
        Err(Error::shape(op, format!("cannot broadcast {rs:?} onto {ls:?}")))
    }

    fn binary(&mut self, op: &'static str, kind: Binary, lhs: Var, rhs: Var) -> Result<Var> {
        let bcast = self.bcast(op, lhs, rhs)?;
        let shape = self.shape(lhs).to_vec();
        let (_, n) = rows_cols(&shape);
        let l = self.data(lhs);
        let r = self.data(rhs);
        let f = |a: S, b: S| match kind {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        };
        let out: Vec<S> = l
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let b = match bcast {
                    Bcast::Same => r[i],
                    Bcast::Row => r[i % n],
                    Bcast::Col => r[i / n],
                    Bcast::Scalar => r[0],
                };
                f(a, b)
            })
            .collect();
        self.push(op, &shape, out, Record::Binary { kind, lhs, rhs, bcast }, &[lhs, rhs])
    }

    /// Elementwise sum; `rhs` may be a row vector, column vector, or scalar.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary("add", Binary::Add, lhs, rhs)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary("sub", Binary::Sub, lhs, rhs)
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary("mul", Binary::Mul, lhs, rhs)
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cs = S::of(c);
        let out = self.data(x).iter().map(|&v| v * cs).collect();
        self.push("scalar_mul", &shape, out, Record::ScalarMul(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        self.push("relu", &shape, out, Record::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| v.exp()).collect();
        self.push("exp", &shape, out, Record::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(bad) = self.data(x).iter().find(|&&v| v <= S::zero()) {
            return Err(Error::domain("log", format!("argument {bad:?} is not positive")));
        }
        let out = self.data(x).iter().map(|&v| v.ln()).collect();
        self.push("log", &shape, out, Record::Log(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() > 2 {
            return Err(Error::shape(
                "softmax_rows",
                format!("expected rank <= 2, got {shape:?}"),
            ));
        }
        let (_, n) = rows_cols(&shape);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| S::of(v / z)));
        }
        self.push("softmax_rows", &shape, out, Record::Softmax(x), &[x])
    }

    /// Scales each row to unit L2 norm. All-zero rows stay zero and are
    /// counted in [`Graph::degenerate_rows`].
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, n) = rows_cols(&shape);
        let mut out = Vec::with_capacity(self.value(x).len());
        let mut inv_norms = Vec::new();
        let mut degenerate = 0;
        for row in self.data(x).chunks(n) {
            let ss: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum();
            let inv = if ss > 0.0 {
                1.0 / ss.sqrt()
            } else {
                degenerate += 1;
                0.0
            };
            inv_norms.push(inv);
            out.extend(row.iter().map(|v| S::of(v.as_f64() * inv)));
        }
        self.degenerate_rows += degenerate;
        self.push(
            "l2_normalize_rows",
            &shape,
            out,
            Record::L2Normalize { x, inv_norms },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        self.push(
            "concat_cols",
            &[m, total],
            out,
            Record::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Concatenates along the leading axis; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() < 2 || s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", format!("{s:?} vs trailing {tail:?}")));
            }
            rows += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.push("concat_rows", &shape, out, Record::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || len == 0 || start + len > s[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {s:?}", start + len),
            ));
        }
        let stride: usize = s[1..].iter().product();
        let out = self.data(x)[start * stride..(start + len) * stride].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        self.push("slice_rows", &shape, out, Record::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {n}", start + len),
            ));
        }
        let d = self.data(x);
        let out = (0..m)
            .flat_map(|i| d[i * n + start..i * n + start + len].iter().copied())
            .collect();
        self.push("slice_cols", &[m, len], out, Record::SliceCols { x, start }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", x)?;
        let out = transpose(self.data(x), m, n);
        self.push("transpose", &[n, m], out, Record::Transpose(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().map(|v| v.as_f64()).sum();
        self.push("sum_all", &[1], vec![S::of(s)], Record::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s: f64 = d.iter().map(|v| v.as_f64()).sum::<f64>() / d.len() as f64;
        self.push("mean_all", &[1], vec![S::of(s)], Record::MeanAll(x), &[x])
    }

    /// Row sums of a matrix, shape `[m, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("sum_rows", x)?;
        let out = self
            .data(x)
            .chunks(n)
            .map(|r| S::of(r.iter().map(|v| v.as_f64()).sum()))
            .collect();
        self.push("sum_rows", &[m, 1], out, Record::SumRows(x), &[x])
    }

    /// Batch normalization over `[n, c]` or `[n, c, h, w]` inputs, per channel.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: &BnMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, spatial) = match shape.as_slice() {
            [n, c] => (*n, *c, 1),
            [n, c, h, w] => (*n, *c, h * w),
            other => {
                return Err(Error::shape(
                    "batchnorm",
                    format!("expected rank 2 or 4, got {other:?}"),
                ))
            }
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batchnorm", format!("affine params must be [{c}]")));
        }
        let d = self.data(x);
        let idx = |ni: usize, ci: usize, p: usize| (ni * c + ci) * spatial + p;
        let count = (n * spatial) as f64;
        let (mean, var, eps, batch) = match mode {
            BnMode::Train { eps } => {
                if n < 2 {
                    return Err(Error::DegenerateBatch(
                        "batchnorm in train mode needs at least 2 samples".into(),
                    ));
                }
                let mut mean = vec![0f64; c];
                let mut var = vec![0f64; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        for p in 0..spatial {
                            s += d[idx(ni, ci, p)].as_f64();
                        }
                    }
                    let m = s / count;
                    let mut v = 0.0;
                    for ni in 0..n {
                        for p in 0..spatial {
                            let t = d[idx(ni, ci, p)].as_f64() - m;
                            v += t * t;
                        }
                    }
                    mean[ci] = m;
                    var[ci] = v / count;
                }
                (mean.clone(), var.clone(), *eps, Some((mean, var)))
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm", "running statistics length"));
                }
                (mean.clone(), var.clone(), *eps, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![S::zero(); d.len()];
        let mut out = vec![S::zero(); d.len()];
        for ni in 0..n {
            for ci in 0..c {
                let (gc, bc) = (g[ci].as_f64(), b[ci].as_f64());
                for p in 0..spatial {
                    let i = idx(ni, ci, p);
                    let h = (d[i].as_f64() - mean[ci]) * inv_std[ci];
                    xhat[i] = S::of(h);
                    out[i] = S::of(gc * h + bc);
                }
            }
        }
        let record = Record::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: batch,
            channels: c,
            spatial,
        };
        self.push("batchnorm", &shape, out, record, &[x, gamma, beta])
    }

    /// Stride-1 convolution with odd square kernels and same-size zero padding.
    /// `x: [b, c, h, w]`, `w: [o, c, k, k]`, `bias: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (b, c, h, wd) = self.dims4("conv2d", x)?;
        let (o, c2, k, k2) = self.dims4("conv2d", w)?;
        if c != c2 || k != k2 || k % 2 == 0 || self.shape(bias) != [o] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(bias)
                ),
            ));
        }
        let cols = im2col(self.data(x), b, c, h, wd, k);
        let hw = h * wd;
        let prod = gemm(self.data(w), &cols, o, c * k * k, b * hw);
        let bd = self.data(bias);
        let mut out = vec![S::zero(); b * o * hw];
        for oi in 0..o {
            for bi in 0..b {
                let src = &prod[oi * b * hw + bi * hw..oi * b * hw + (bi + 1) * hw];
                let dst = &mut out[(bi * o + oi) * hw..(bi * o + oi + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bd[oi];
                }
            }
        }
        self.push(
            "conv2d",
            &[b, o, h, wd],
            out,
            Record::Conv2d { x, w, b: bias, cols },
            &[x, w, bias],
        )
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("spatial size {h}x{w} is not even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let d = self.data(x);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in d.chunks(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    let s = plane[2 * y * w + 2 * xx].as_f64()
                        + plane[2 * y * w + 2 * xx + 1].as_f64()
                        + plane[(2 * y + 1) * w + 2 * xx].as_f64()
                        + plane[(2 * y + 1) * w + 2 * xx + 1].as_f64();
                    out.push(S::of(0.25 * s));
                }
            }
        }
        self.push("avg_pool2", &[b, c, oh, ow], out, Record::AvgPool2(x), &[x])
    }

    /// Mean over spatial positions: `[b, c, h, w] -> [b, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4("global_avg_pool", x)?;
        let inv = 1.0 / (h * w) as f64;
        let out = self
            .data(x)
            .chunks(h * w)
            .map(|p| S::of(p.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
            .collect();
        self.push("global_avg_pool", &[b, c], out, Record::GlobalAvgPool(x), &[x])
    }

    /// `log Σ_j exp(x_ij)` over the entries with `mask[i·n + j]` set; `[m, 1]`.
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims2("logsumexp_rows", x)?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::shape("logsumexp_rows", "mask size"));
            }
        }
        let d = self.data(x);
        let on = |i: usize| mask.is_none_or(|mk| mk[i]);
        let mut out = Vec::with_capacity(m);
        let mut weights = vec![0f64; m * n];
        for i in 0..m {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if on(i * n + j) {
                    mx = mx.max(d[i * n + j].as_f64());
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::domain(
                    "logsumexp_rows",
                    format!("row {i} has no unmasked entries"),
                ));
            }
            let mut z = 0.0;
            for j in 0..n {
                if on(i * n + j) {
                    let e = (d[i * n + j].as_f64() - mx).exp();
                    weights[i * n + j] = e;
                    z += e;
                }
            }
            for wgt in &mut weights[i * n..(i + 1) * n] {
                *wgt /= z;
            }
            out.push(S::of(mx + z.ln()));
        }
        self.push("logsumexp_rows", &[m, 1], out, Record::LogSumExp { x, weights }, &[x])
    }

    /// `out[i] = x[i, idx[i]]`, shape `[m, 1]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_cols", x)?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(Error::shape("gather_cols", format!("indices for [{m}, {n}]")));
        }
        let d = self.data(x);
        let out = idx.iter().enumerate().map(|(i, &j)| d[i * n + j]).collect();
        self.push(
            "gather_cols",
            &[m, 1],
            out,
            Record::Gather { x, idx: idx.to_vec() },
            &[x],
        )
    }

    /// Reverse sweep from a scalar `loss`. Every leaf that requires grad ends
    /// with `grad = ∂loss/∂leaf` (zeros if unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut report = BackwardReport::default();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            report.visited += 1;
            if let Record::Leaf = self.nodes[id].record {
                let gs = g.into_iter().map(S::of).collect();
                self.nodes[id].value.set_grad(gs)?;
                continue;
            }
            for (input, contrib) in self.vjp(id, &g) {
                if !self.needs(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.record, Record::Leaf) && node.value.grad().is_none() {
                let n = node.value.len();
                node.value.set_grad(vec![S::zero(); n])?;
            }
        }
        Ok(report)
    }

    fn f64s(&self, v: Var) -> Vec<f64> {
        self.data(v).iter().map(|x| x.as_f64()).collect()
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out = self.nodes[id].value.data();
        let out_shape = self.nodes[id].value.shape();
        match &self.nodes[id].record {
            Record::Leaf => Vec::new(),
            Record::MatMul(a, b) => {
                let (m, k) = rows_cols(self.shape(*a));
                let (_, n) = rows_cols(self.shape(*b));
                let mut res = Vec::new();
                if self.needs(*a) {
                    let bt = transpose(&self.f64s(*b), k, n);
                    res.push((*a, gemm(g, &bt, m, n, k)));
                }
                if self.needs(*b) {
                    let at = transpose(&self.f64s(*a), m, k);
                    res.push((*b, gemm(&at, g, k, m, n)));
                }
                res
            }
            Record::Binary { kind, lhs, rhs, bcast } => {
                let (_, n) = rows_cols(out_shape);
                let r = self.data(*rhs);
                let l = self.data(*lhs);
                let rv = |i: usize| -> f64 {
                    match bcast {
                        Bcast::Same => r[i],
                        Bcast::Row => r[i % n],
                        Bcast::Col => r[i / n],
                        Bcast::Scalar => r[0],
                    }
                    .as_f64()
                };
                let gl: Vec<f64> = match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => g.iter().enumerate().map(|(i, gi)| gi * rv(i)).collect(),
                };
                let gr_full: Vec<f64> = match kind {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|v| -v).collect(),
                    Binary::Mul => g.iter().zip(l).map(|(gi, li)| gi * li.as_f64()).collect(),
                };
                let mut gr = vec![0f64; r.len()];
                for (i, v) in gr_full.iter().enumerate() {
                    let j = match bcast {
                        Bcast::Same => i,
                        Bcast::Row => i % n,
                        Bcast::Col => i / n,
                        Bcast::Scalar => 0,
                    };
                    gr[j] += v;
                }
                vec![(*lhs, gl), (*rhs, gr)]
            }
            Record::ScalarMul(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Record::Relu(x) => {
                let xd = self.data(*x);
                vec![(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(gi, &xi)| if xi > S::zero() { *gi } else { 0.0 })
                        .collect(),
                )]
            }
            Record::Exp(x) => vec![(*x, g.iter().zip(out).map(|(gi, yi)| gi * yi.as_f64()).collect())],
            Record::Log(x) => {
                let xd = self.data(*x);
                vec![(*x, g.iter().zip(xd).map(|(gi, xi)| gi / xi.as_f64()).collect())]
            }
            Record::Softmax(x) => {
                let (_, n) = rows_cols(out_shape);
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(n).zip(out.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b.as_f64()).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(gi, yi)| yi.as_f64() * (gi - dot)));
                }
                vec![(*x, gx)]
            }
            Record::L2Normalize { x, inv_norms } => {
                let (_, n) = rows_cols(out_shape);
                let mut gx = Vec::with_capacity(g.len());
                for ((grow, yrow), inv) in g.chunks(n).zip(out.chunks(n)).zip(inv_norms) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b.as_f64()).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(gi, yi)| (gi - yi.as_f64() * dot) * inv));
                }
                vec![(*x, gx)]
            }
            Record::ConcatCols(parts) => {
                let (m, total) = rows_cols(out_shape);
                let mut res = Vec::new();
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = rows_cols(self.shape(p));
                    let gp = (0..m)
                        .flat_map(|i| g[i * total + offset..i * total + offset + c].iter().copied())
                        .collect();
                    res.push((p, gp));
                    offset += c;
                }
                res
            }
            Record::ConcatRows(parts) => {
                let mut res = Vec::new();
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    res.push((p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
                res
            }
            Record::SliceRows { x, start } => {
                let xs = self.shape(*x);
                let stride: usize = xs[1..].iter().product();
                let mut gx = vec![0f64; self.value(*x).len()];
                gx[start * stride..start * stride + g.len()].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Record::SliceCols { x, start } => {
                let (m, n) = rows_cols(self.shape(*x));
                let (_, len) = rows_cols(out_shape);
                let mut gx = vec![0f64; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![(*x, gx)]
            }
            Record::Transpose(x) => {
                let (m, n) = rows_cols(self.shape(*x));
                vec![(*x, transpose(g, n, m))]
            }
            Record::SumAll(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Record::MeanAll(x) => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Record::SumRows(x) => {
                let (m, n) = rows_cols(self.shape(*x));
                vec![(*x, (0..m * n).map(|i| g[i / n]).collect())]
            }
            Record::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                channels,
                spatial,
            } => {
                let (c, sp) = (*channels, *spatial);
                let n = g.len() / (c * sp);
                let count = (n * sp) as f64;
                let idx = |ni: usize, ci: usize, p: usize| (ni * c + ci) * sp + p;
                let gam = self.data(*gamma);
                let mut dgamma = vec![0f64; c];
                let mut dbeta = vec![0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        for p in 0..sp {
                            let i = idx(ni, ci, p);
                            dgamma[ci] += g[i] * xhat[i].as_f64();
                            dbeta[ci] += g[i];
                        }
                    }
                }
                let mut res = Vec::new();
                if self.needs(*x) {
                    let mut gx = vec![0f64; g.len()];
                    for ci in 0..c {
                        let scale = gam[ci].as_f64() * inv_std[ci];
                        for ni in 0..n {
                            for p in 0..sp {
                                let i = idx(ni, ci, p);
                                gx[i] = if batch_stats.is_some() {
                                    scale / count * (count * g[i] - dbeta[ci] - xhat[i].as_f64() * dgamma[ci])
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                res.push((*gamma, dgamma));
                res.push((*beta, dbeta));
                res
            }
            Record::Conv2d { x, w, b, cols } => {
                let (bsz, c, h, wd) = match self.shape(*x) {
                    [b, c, h, w] => (*b, *c, *h, *w),
                    _ => unreachable!(),
                };
                let (o, _, k, _) = match self.shape(*w) {
                    [o, c, k, k2] => (*o, *c, *k, *k2),
                    _ => unreachable!(),
                };
                let hw = h * wd;
                let ck = c * k * k;
                // Upstream gradient rearranged to [o, b·h·w].
                let mut gmat = vec![0f64; o * bsz * hw];
                for bi in 0..bsz {
                    for oi in 0..o {
                        let src = &g[(bi * o + oi) * hw..(bi * o + oi + 1) * hw];
                        gmat[oi * bsz * hw + bi * hw..oi * bsz * hw + (bi + 1) * hw].copy_from_slice(src);
                    }
                }
                let mut res = Vec::new();
                if self.needs(*x) {
                    let wt = transpose(&self.f64s(*w), o, ck);
                    let dcols = gemm(&wt, &gmat, ck, o, bsz * hw);
                    res.push((*x, col2im(&dcols, bsz, c, h, wd, k)));
                }
                let colsf: Vec<f64> = cols.iter().map(|v| v.as_f64()).collect();
                res.push((*w, gemm_nt(&gmat, &colsf, o, bsz * hw, ck)));
                let db = gmat.chunks(bsz * hw).map(|r| r.iter().sum()).collect();
                res.push((*b, db));
                res
            }
            Record::AvgPool2(x) => {
                let (_, _, h, w) = match self.shape(*x) {
                    [b, c, h, w] => (*b, *c, *h, *w),
                    _ => unreachable!(),
                };
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0f64; self.value(*x).len()];
                for (plane, gp) in gx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for y in 0..h {
                        for xx in 0..w {
                            plane[y * w + xx] = 0.25 * gp[(y / 2) * ow + xx / 2];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Record::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f64;
                vec![(*x, (0..self.value(*x).len()).map(|i| g[i / hw] * inv).collect())]
            }
            Record::LogSumExp { x, weights } => {
                let (_, n) = rows_cols(self.shape(*x));
                vec![(*x, weights.iter().enumerate().map(|(i, w)| w * g[i / n]).collect())]
            }
            Record::Gather { x, idx } => {
                let (m, n) = rows_cols(self.shape(*x));
                let mut gx = vec![0f64; m * n];
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * n + j] = g[i];
                }
                vec![(*x, gx)]
            }
        }
    }
}
