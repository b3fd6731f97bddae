//! Define-by-run reverse-mode differentiation over a fixed operation set.
//!
//! A [`Graph`] records every operation as it executes. Node indices are
//! assigned in execution order, so the node list is already topologically
//! sorted and the backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::stats::{self, PearsonParts};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    MeanAxis(Var, usize),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Pearson(Var, PearsonParts),
    FrobeniusToIdentity(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::MeanAxis(..) => "mean_axis",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Gather(..) => "gather",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Pearson(..) => "pearson_correlation",
            Op::FrobeniusToIdentity(..) => "frobenius_distance_to_identity",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericalInstability {
                op: format!("{} (node {})", op.name(), self.nodes.len()),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(Error::shape(
                "add_row",
                format!("bias of {} for {n} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean over all elements.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over `axis` of a matrix: axis 0 yields `1×n`, axis 1 yields `m×1`.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        let data = self.value(a).data();
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; n];
                for row in data.chunks(n) {
                    acc.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                acc.iter_mut().for_each(|v| *v /= m as f64);
                Tensor::from_parts(vec![1, n], acc)
            }
            1 => {
                let acc = data.chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
                Tensor::from_parts(vec![m, 1], acc)
            }
            _ => return Err(Error::shape("mean_axis", format!("axis {axis} on a matrix"))),
        };
        self.push(out, Op::MeanAxis(a, axis), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalization with learned gain and bias vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", format!("gain/bias must have {n} entries")));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row gather; serves as the embedding lookup when `a` is a table.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather", format!("row {bad} of {rows}")));
        }
        let out = self.value(a).select_rows(idx);
        self.push(out, Op::Gather(a, idx.to_vec()), &[a])
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n}")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push(Tensor::from_parts(vec![m, w], out), Op::SliceCols(a, start, end), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|&p| self.dims(p).1 != n) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n.max(1);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Mean softmax cross-entropy of `logits` (n×N) against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if labels.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {m} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange { label: bad, classes: n });
        }
        let z = self.value(logits).data();
        let mut probs = z.to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(n).enumerate() {
            let lse = log_sum_exp(row);
            total += lse - row[labels[i]];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = total / m as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Pearson correlation between the columns of an n×d batch.
    pub fn pearson_correlation(&mut self, e: Var) -> Result<Var> {
        let parts = stats::pearson_parts(self.value(e))?;
        let sigma = parts.sigma.clone();
        self.push(sigma, Op::Pearson(e, parts), &[e])
    }

    /// `‖S − I‖_F`.
    pub fn frobenius_distance_to_identity(&mut self, s: Var) -> Result<Var> {
        let v = stats::frobenius_distance_to_identity(self.value(s))?;
        self.push(Tensor::scalar(v), Op::FrobeniusToIdentity(s), &[s])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if !g.is_finite() {
                return Err(Error::NumericalInstability {
                    op: format!("{} backward (node {idx})", node.op.name()),
                });
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.acc(grads, *a, &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(self.value(*a).data(), gd, &mut db, m, k, n);
                    self.acc(grads, *b, &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.acc(grads, *a, &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_acc(gd, self.value(*a).data(), &mut db, m, n, k);
                    self.acc(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd);
                self.acc(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd);
                if self.wants(*b) {
                    let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                    self.acc(grads, *b, &neg);
                }
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, gd);
                if self.wants(*bias) {
                    let n = self.dims(*a).1;
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    self.acc(grads, *bias, &db);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    self.acc(grads, *a, &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.acc(grads, *b, &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = gd.iter().map(|g| g * c).collect();
                self.acc(grads, *a, &d);
            }
            Op::Square(a) => {
                let d: Vec<f64> = gd.iter().zip(self.value(*a).data()).map(|(g, x)| 2.0 * x * g).collect();
                self.acc(grads, *a, &d);
            }
            Op::Sum(a) => {
                let d = vec![gd[0]; self.value(*a).len()];
                self.acc(grads, *a, &d);
            }
            Op::MeanAxis(a, axis) => {
                let (m, n) = self.dims(*a);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = if *axis == 0 { gd[j] / m as f64 } else { gd[i] / n as f64 };
                    }
                }
                self.acc(grads, *a, &d);
            }
            Op::SoftmaxRows(a) => {
                let n = self.dims(*a).1;
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.acc(grads, *a, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gd[i * n + j] * xhat[i * n + j];
                            db[j] += gd[i * n + j];
                        }
                    }
                    self.acc(grads, *gain, &dg);
                    self.acc(grads, *bias, &db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gd[i * n + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[i * n + j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = gd[i * n + j] * gv[j];
                            dx[i * n + j] = rstd[i] * (dh - mean_dh - xhat[i * n + j] * mean_dh_h);
                        }
                    }
                    self.acc(grads, *x, &dx);
                }
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.acc(grads, *a, &d);
            }
            Op::Gather(a, idx) => {
                if self.wants(*a) {
                    let (m, n) = self.dims(*a);
                    let mut d = vec![0.0; m * n];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            d[src * n + j] += gd[r * n + j];
                        }
                    }
                    self.acc(grads, *a, &d);
                }
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = self.dims(*a);
                let w = end - start;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.acc(grads, *a, &d);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.acc(grads, p, &d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, &gd[offset..offset + len]);
                    offset += len;
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (m, n) = self.dims(*logits);
                let scale = gd[0] / m as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * n + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.acc(grads, *logits, &d);
            }
            Op::Pearson(e, parts) => {
                let d = stats::pearson_backward(parts, gd);
                self.acc(grads, *e, &d);
            }
            Op::FrobeniusToIdentity(s) => {
                let f = node.value.item();
                if f > 0.0 {
                    let sv = self.value(*s);
                    let n = sv.rows();
                    let mut d = sv.data().to_vec();
                    for i in 0..n {
                        d[i * n + i] -= 1.0;
                    }
                    d.iter_mut().for_each(|v| *v *= gd[0] / f);
                    self.acc(grads, *s, &d);
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, d: &[f64]) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.data_mut().iter_mut().zip(d).for_each(|(o, x)| *o += x),
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.value(v).shape().to_vec(), d.to_vec()));
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(3.0));
        let sq = g.square(w).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let w = g.param(Tensor::scalar(5.0));
        let p = g.mul(c, w).unwrap();
        let grads = g.backward(p).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().item(), 2.0);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(4.0));
        let p = g.mul(w, w).unwrap();
        let s = g.add(p, w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 9.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2, 2]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn overflow_names_the_node() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(1e200));
        let err = g.square(w).unwrap_err();
        match err {
            Error::NumericalInstability { op } => assert!(op.starts_with("square")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            g.cross_entropy(z, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }
}
