//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every op appends a node whose inputs already exist on the tape, so node
//! order is a topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::hyperbolic::raw;
use crate::tensor::{kernels, Tensor};

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
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleByScalar(Var, Var),
    ScaleRows(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    RepeatRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherElems {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    GatherCols {
        x: Var,
        cols: Vec<usize>,
    },
    TopKGates {
        probs: Var,
        sel: Vec<Vec<usize>>,
        sums: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    ExpMap0 {
        x: Var,
        c: f64,
        max_norm: f64,
    },
    LogMap0 {
        x: Var,
        c: f64,
    },
    LorentzDistSq {
        x: Var,
        y: Var,
        c: f64,
    },
    OrderLoss {
        v: Var,
        t: Var,
        grad_v: Vec<f64>,
        grad_t: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The compute graph: an append-only list of op records.
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    /// A tape in checked mode: every op output is scanned for NaN/Inf.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn unchecked() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        dims(self.value(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (k2, n) = self.mat(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (n, k2) = self.mat(b);
        if k != k2 {
            return Err(Error::dim("matmul_bt", format!("[{m}×{k}] · [{n}×{k2}]ᵀ")));
        }
        let out = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul_bt", Tensor::from_parts(vec![m, n], out), Op::MatMulBT(a, b), &[a, b])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` row to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.mat(a);
        if self.value(row).numel() != n {
            return Err(Error::dim("add_row", format!("row of {} onto width {n}", self.value(row).numel())));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.push("add_row", Tensor::from_parts(shape, data), Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    /// Multiplies every entry by a single-element variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_by", "scale must hold one element"));
        }
        let k = self.value(s).item();
        let t = self.value(a);
        let t = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * k).collect());
        self.push("scale_by", t, Op::ScaleByScalar(a, s), &[a, s])
    }

    /// Row `i` of `a` times `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, n) = self.mat(a);
        if self.value(w).numel() != m {
            return Err(Error::dim("scale_rows", format!("{} weights for {m} rows", self.value(w).numel())));
        }
        let wv = self.value(w).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            data[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= wv[i]);
        }
        let shape = self.value(a).shape().to_vec();
        self.push("scale_rows", Tensor::from_parts(shape, data), Op::ScaleRows(a, w), &[a, w])
    }

    fn map(&mut self, name: &'static str, a: Var, f: fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let t = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.push(name, t, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, kernels::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax along `axis`; masked-out (`false`) entries get exactly zero.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(Error::InvalidArgument(format!("softmax axis {axis} for shape {:?}", t.shape())));
        }
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(Error::dim("softmax", "mask size differs from input"));
            }
        }
        let out = kernels::softmax_axis(t.data(), t.shape(), axis, mask);
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("softmax", t, Op::Softmax { x, axis }, &[x])
    }

    /// Row-wise RMS normalisation with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let (m, n) = self.mat(x);
        if self.value(gain).numel() != n {
            return Err(Error::dim("rms_norm", format!("gain of {} for width {n}", self.value(gain).numel())));
        }
        let g = self.value(gain).data().to_vec();
        let xd = self.value(x).data();
        let mut inv_rms = Vec::with_capacity(m);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + EPS).sqrt();
            inv_rms.push(inv);
            for j in 0..n {
                data[i * n + j] = row[j] * inv * g[j];
            }
        }
        self.push(
            "rms_norm",
            Tensor::from_parts(vec![m, n], data),
            Op::RmsNorm { x, gain, inv_rms },
            &[x, gain],
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.mat(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![idx.len(), n], data),
            Op::GatherRows { x, idx: idx.to_vec() },
            &[x],
        )
    }

    /// `base` with row `src[r]` added onto row `idx[r]`.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(base);
        let (r, n2) = self.mat(src);
        if n != n2 || r != idx.len() || idx.iter().any(|&i| i >= m) {
            return Err(Error::dim("scatter_add_rows", format!("[{r}×{n2}] into [{m}×{n}]")));
        }
        let mut data = self.value(base).data().to_vec();
        let s = self.value(src).data();
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..n {
                data[i * n + j] += s[k * n + j];
            }
        }
        self.push(
            "scatter_add_rows",
            Tensor::from_parts(vec![m, n], data),
            Op::ScatterAddRows {
                base,
                src,
                idx: idx.to_vec(),
            },
            &[base, src],
        )
    }

    /// Column means as a `[1×n]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x);
        if m == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += d[i * n + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        self.push("mean_rows", Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), &[x])
    }

    /// Stacks a single row `m` times.
    pub fn repeat_rows(&mut self, x: Var, m: usize) -> Result<Var> {
        let (r, n) = self.mat(x);
        if r != 1 {
            return Err(Error::dim("repeat_rows", "input must be a single row"));
        }
        let row = self.value(x).data().to_vec();
        let data = row.iter().copied().cycle().take(m * n).collect();
        self.push("repeat_rows", Tensor::from_parts(vec![m, n], data), Op::RepeatRows(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.mat(parts[0]).0;
        if parts.iter().any(|&p| self.mat(p).0 != m) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.mat(p).1).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat(x);
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of width {n}")));
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&self.value(x).row(i)[start..end]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![m, end - start], data),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    /// Picks entries `(row, col)` into a vector.
    pub fn gather_elems(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.mat(x);
        if idx.iter().any(|&(i, j)| i >= m || j >= n) {
            return Err(Error::dim("gather_elems", "index out of range"));
        }
        let d = self.value(x).data();
        let data = idx.iter().map(|&(i, j)| d[i * n + j]).collect();
        self.push(
            "gather_elems",
            Tensor::from_parts(vec![idx.len()], data),
            Op::GatherElems { x, idx: idx.to_vec() },
            &[x],
        )
    }

    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(x);
        if cols.iter().any(|&j| j >= n) {
            return Err(Error::dim("gather_cols", "column out of range"));
        }
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(m * cols.len());
        for i in 0..m {
            data.extend(cols.iter().map(|&j| d[i * n + j]));
        }
        self.push(
            "gather_cols",
            Tensor::from_parts(vec![m, cols.len()], data),
            Op::GatherCols { x, cols: cols.to_vec() },
            &[x],
        )
    }

    /// Selected probabilities per row, renormalised to sum to one.
    pub fn top_k_gates(&mut self, probs: Var, sel: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = self.mat(probs);
        let k = sel.first().map_or(0, Vec::len);
        if sel.len() != m || sel.iter().any(|s| s.len() != k || s.iter().any(|&j| j >= n)) {
            return Err(Error::dim("top_k_gates", "selection does not match probabilities"));
        }
        let p = self.value(probs).data();
        let mut sums = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * k);
        for (i, s) in sel.iter().enumerate() {
            let total: f64 = s.iter().map(|&j| p[i * n + j]).sum();
            if total <= 0.0 {
                return Err(Error::Contract("top-k selection carries zero probability".into()));
            }
            sums.push(total);
            data.extend(s.iter().map(|&j| p[i * n + j] / total));
        }
        self.push(
            "top_k_gates",
            Tensor::from_parts(vec![m, k], data),
            Op::TopKGates {
                probs,
                sel: sel.to_vec(),
                sums,
            },
            &[probs],
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(logits);
        if targets.len() != m || targets.iter().any(|&t| t >= n) || m == 0 {
            return Err(Error::dim("cross_entropy", format!("{} targets for [{m}×{n}]", targets.len())));
        }
        let probs = kernels::softmax_axis(self.value(logits).data(), &[m, n], 1, None);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = self.value(logits).row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum::<f64>()
            / m as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Row-wise exponential map at the origin: `[m×d] → [m×(d+1)]`.
    pub fn exp_map_origin(&mut self, x: Var, c: f64, max_norm: f64) -> Result<Var> {
        let (m, d) = self.mat(x);
        let mut data = Vec::with_capacity(m * (d + 1));
        for i in 0..m {
            data.extend(raw::exp0(self.value(x).row(i), c, max_norm));
        }
        self.push(
            "exp_map_origin",
            Tensor::from_parts(vec![m, d + 1], data),
            Op::ExpMap0 { x, c, max_norm },
            &[x],
        )
    }

    /// Row-wise logarithmic map at the origin: `[m×(d+1)] → [m×d]`.
    pub fn log_map_origin(&mut self, x: Var, c: f64) -> Result<Var> {
        let (m, d1) = self.mat(x);
        if d1 < 2 {
            return Err(Error::dim("log_map_origin", "need at least one space coordinate"));
        }
        let mut data = Vec::with_capacity(m * (d1 - 1));
        for i in 0..m {
            data.extend(raw::log0(self.value(x).row(i), c));
        }
        self.push(
            "log_map_origin",
            Tensor::from_parts(vec![m, d1 - 1], data),
            Op::LogMap0 { x, c },
            &[x],
        )
    }

    /// Squared Lorentzian distance between two single points.
    pub fn lorentz_distance_sq(&mut self, x: Var, y: Var, c: f64) -> Result<Var> {
        if self.value(x).numel() != self.value(y).numel() {
            return Err(Error::dim("lorentz_distance_sq", "points differ in dimension"));
        }
        let d = raw::distance_sq(self.value(x).data(), self.value(y).data(), c);
        self.push("lorentz_distance_sq", Tensor::scalar(d), Op::LorentzDistSq { x, y, c }, &[x, y])
    }

    /// Entailment-cone hinge between apex `v` and candidate `t`.
    pub fn order_loss(&mut self, v: Var, t: Var, c: f64, cone_k: f64) -> Result<Var> {
        if self.value(v).numel() != self.value(t).numel() {
            return Err(Error::dim("order_loss", "points differ in dimension"));
        }
        let (loss, grad_v, grad_t) = raw::order_loss(self.value(v).data(), self.value(t).data(), c, cone_k);
        self.push(
            "order_loss",
            Tensor::scalar(loss),
            Op::OrderLoss { v, t, grad_v, grad_t },
            &[v, t],
        )
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
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|d| Tensor::from_parts(n.value.shape().to_vec(), d)))
                .collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(&nodes[a.0].value);
                let n = dims(&nodes[b.0].value).1;
                acc(*a, &|s| add_into(s, &kernels::matmul_bt(g, val(*b), m, n, k)));
                acc(*b, &|s| add_into(s, &kernels::matmul_at(val(*a), g, m, k, n)));
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = dims(&nodes[a.0].value);
                let n = dims(&nodes[b.0].value).0;
                acc(*a, &|s| add_into(s, &kernels::matmul(g, val(*b), m, n, k)));
                acc(*b, &|s| add_into(s, &kernels::matmul_at(g, val(*a), m, n, k)));
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).zip(val(*b)).for_each(|((x, y), z)| *x += y * z));
                acc(*b, &|s| s.iter_mut().zip(g).zip(val(*a)).for_each(|((x, y), z)| *x += y * z));
            }
            Op::AddRow(a, r) => {
                let n = val(*r).len();
                acc(*a, &|s| add_into(s, g));
                acc(*r, &|s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % n] += gv;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y)),
            Op::ScaleByScalar(a, k) => {
                let kv = val(*k)[0];
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += kv * y));
                acc(*k, &|s| s[0] += g.iter().zip(val(*a)).map(|(x, y)| x * y).sum::<f64>());
            }
            Op::ScaleRows(a, w) => {
                let (m, n) = dims(&nodes[a.0].value);
                let wv = val(*w);
                acc(*a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += wv[i] * g[i * n + j];
                        }
                    }
                });
                acc(*w, &|s| {
                    let av = val(*a);
                    for i in 0..m {
                        s[i] += (0..n).map(|j| g[i * n + j] * av[i * n + j]).sum::<f64>();
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * kernels::gelu_grad(x[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                acc(*x, &|s| {
                    for (base, stride, len) in kernels::lanes(shape, *axis) {
                        let dot: f64 = (0..len).map(|j| g[base + j * stride] * y[base + j * stride]).sum();
                        for j in 0..len {
                            let p = base + j * stride;
                            s[p] += y[p] * (g[p] - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (m, n) = dims(&nodes[x.0].value);
                let xv = val(*x);
                let gv = val(*gain);
                acc(*x, &|s| {
                    for i in 0..m {
                        let inv = inv_rms[i];
                        let dot: f64 = (0..n).map(|j| gv[j] * g[i * n + j] * xv[i * n + j]).sum();
                        for j in 0..n {
                            s[i * n + j] += inv * gv[j] * g[i * n + j] - inv.powi(3) / n as f64 * xv[i * n + j] * dot;
                        }
                    }
                });
                acc(*gain, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[j] += g[i * n + j] * xv[i * n + j] * inv_rms[i];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = dims(&nodes[table.0].value).1;
                acc(*table, &|s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let n = dims(&nodes[x.0].value).1;
                acc(*x, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            s[i * n + j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::ScatterAddRows { base, src, idx } => {
                let n = dims(&nodes[base.0].value).1;
                acc(*base, &|s| add_into(s, g));
                acc(*src, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            s[r * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = dims(&nodes[x.0].value);
                acc(*x, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::RepeatRows(x) => {
                let n = nodes[x.0].value.numel();
                acc(*x, &|s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % n] += gv;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = dims(&nodes[p.0].value).1;
                    let off = offset;
                    acc(*p, &|s| {
                        for i in 0..m {
                            for j in 0..w {
                                s[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let n = dims(&nodes[x.0].value).1;
                let (m, w) = dims(&node.value);
                acc(*x, &|s| {
                    for i in 0..m {
                        for j in 0..w {
                            s[i * n + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::GatherElems { x, idx } => {
                let n = dims(&nodes[x.0].value).1;
                acc(*x, &|s| {
                    for (k, &(i, j)) in idx.iter().enumerate() {
                        s[i * n + j] += g[k];
                    }
                });
            }
            Op::GatherCols { x, cols } => {
                let n = dims(&nodes[x.0].value).1;
                let m = node.value.rows();
                let w = cols.len();
                acc(*x, &|s| {
                    for i in 0..m {
                        for (k, &j) in cols.iter().enumerate() {
                            s[i * n + j] += g[i * w + k];
                        }
                    }
                });
            }
            Op::TopKGates { probs, sel, sums } => {
                let n = dims(&nodes[probs.0].value).1;
                let out = node.value.data();
                acc(*probs, &|s| {
                    for (i, row) in sel.iter().enumerate() {
                        let k = row.len();
                        let dot: f64 = (0..k).map(|t| g[i * k + t] * out[i * k + t]).sum();
                        for (t, &j) in row.iter().enumerate() {
                            s[i * n + j] += (g[i * k + t] - dot) / sums[i];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = dims(&nodes[logits.0].value).1;
                let m = targets.len() as f64;
                acc(*logits, &|s| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[i * n + j] += g[0] * (probs[i * n + j] - onehot) / m;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &|s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::ExpMap0 { x, c, max_norm } => {
                let (m, d) = dims(&nodes[x.0].value);
                let xv = val(*x);
                acc(*x, &|s| {
                    for i in 0..m {
                        let gi = &g[i * (d + 1)..(i + 1) * (d + 1)];
                        let back = raw::exp0_backward(&xv[i * d..(i + 1) * d], *c, *max_norm, gi);
                        add_into(&mut s[i * d..(i + 1) * d], &back);
                    }
                });
            }
            Op::LogMap0 { x, c } => {
                let (m, d1) = dims(&nodes[x.0].value);
                let d = d1 - 1;
                let xv = val(*x);
                acc(*x, &|s| {
                    for i in 0..m {
                        let back = raw::log0_backward(&xv[i * d1..(i + 1) * d1], *c, &g[i * d..(i + 1) * d]);
                        add_into(&mut s[i * d1..(i + 1) * d1], &back);
                    }
                });
            }
            Op::LorentzDistSq { x, y, c } => {
                let (gx, gy) = raw::distance_sq_backward(val(*x), val(*y), *c, g[0]);
                acc(*x, &|s| add_into(s, &gx));
                acc(*y, &|s| add_into(s, &gy));
            }
            Op::OrderLoss { v, t, grad_v, grad_t } => {
                acc(*v, &|s| s.iter_mut().zip(grad_v).for_each(|(a, b)| *a += g[0] * b));
                acc(*t, &|s| s.iter_mut().zip(grad_t).for_each(|(a, b)| *a += g[0] * b));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Gradients of one backward sweep, indexed by tape variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not influence the loss or does not
    /// require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient, or zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `build`'s scalar output w.r.t. leaf `i`.
    fn check<F>(inputs: &[Tensor], build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], input);
            for e in 0..input.numel() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.data_mut()[e] += delta;
                            }
                            tape.leaf(t, true)
                        })
                        .collect();
                    let o = build(&mut tape, &vs);
                    tape.value(o).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                let rel = (a - numeric).abs() / a.abs().max(1e-8);
                assert!(
                    rel < 1e-4 || (a - numeric).abs() < 1e-9,
                    "input {k} entry {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Projects an op output onto fixed random weights to get a scalar.
    fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let shape = tape.shape(x).to_vec();
        let w = tape.constant(rand(&shape, seed));
        let p = tape.mul(x, w).unwrap();
        tape.sum(p).unwrap()
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand(&[3], 1), true);
        let zero = tape.scale(x, 0.0).unwrap();
        let s = tape.sum(zero).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_loss_gradient_is_exact() {
        let w = rand(&[1, 5], 2);
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let x = tape.leaf(rand(&[5, 1], 3), true);
        let y = tape.matmul(wv, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), w.data());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand(&[2, 2], 1), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn checked_mode_catches_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1e200]), true);
        let y = tape.scale(x, 1e200);
        assert!(matches!(y, Err(Error::NonFinite("scale"))));
        let mut lax = Tape::unchecked();
        let x = lax.leaf(Tensor::vector(vec![1e200]), true);
        assert!(lax.scale(x, 1e200).is_ok());
    }

    #[test]
    fn matmul_family_gradients() {
        check(&[rand(&[3, 4], 1), rand(&[4, 2], 2)], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, 9)
        });
        check(&[rand(&[3, 4], 3), rand(&[5, 4], 4)], |t, v| {
            let y = t.matmul_bt(v[0], v[1]).unwrap();
            project(t, y, 9)
        });
    }

    #[test]
    fn elementwise_gradients() {
        check(&[rand(&[2, 3], 5), rand(&[2, 3], 6), rand(&[3], 7)], |t, v| {
            let a = t.mul(v[0], v[1]).unwrap();
            let b = t.sub(a, v[1]).unwrap();
            let c = t.add_row(b, v[2]).unwrap();
            let d = t.gelu(c).unwrap();
            let e = t.sigmoid(d).unwrap();
            let f = t.add(e, v[0]).unwrap();
            project(t, f, 10)
        });
    }

    #[test]
    fn softmax_gradients_both_axes() {
        for axis in [0, 1] {
            check(&[rand(&[3, 4], 11)], |t, v| {
                let y = t.softmax(v[0], axis).unwrap();
                project(t, y, 12)
            });
        }
        let mask = [true, false, true, true, true, false];
        check(&[rand(&[2, 3], 13)], |t, v| {
            let y = t.masked_softmax(v[0], 1, Some(&mask)).unwrap();
            project(t, y, 14)
        });
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let x = Tensor::randn(&[6], 30.0, &mut rng);
            let shift: f64 = rng.random_range(-50.0..50.0);
            let shifted = Tensor::vector(x.data().iter().map(|v| v + shift).collect());
            let p = crate::tensor::softmax(&x, 0).unwrap();
            let q = crate::tensor::softmax(&shifted, 0).unwrap();
            assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.max_abs_diff(&q) < 1e-12);
        }
    }

    #[test]
    fn structural_op_gradients() {
        check(&[rand(&[4, 3], 20), rand(&[3], 21), rand(&[2, 3], 22)], |t, v| {
            let n = t.rms_norm(v[0], v[1]).unwrap();
            let g = t.gather_rows(n, &[3, 0, 3]).unwrap();
            let sc = t.scatter_add_rows(n, v[2], &[1, 1]).unwrap();
            let m = t.mean_rows(g).unwrap();
            let r = t.repeat_rows(m, 4).unwrap();
            let c = t.concat_cols(&[sc, r]).unwrap();
            let s = t.slice_cols(c, 1, 5).unwrap();
            project(t, s, 23)
        });
        check(&[rand(&[5, 3], 24)], |t, v| {
            let e = t.embedding(v[0], &[4, 1, 4]).unwrap();
            let c = t.gather_cols(e, &[2, 0]).unwrap();
            let el = t.gather_elems(c, &[(0, 1), (2, 0)]).unwrap();
            let sr = t.scale_rows(c, el).unwrap_or(c);
            project(t, sr, 25)
        });
    }

    #[test]
    fn scale_rows_and_scalar_gradients() {
        check(&[rand(&[3, 2], 30), rand(&[3], 31), rand(&[1], 32)], |t, v| {
            let a = t.scale_rows(v[0], v[1]).unwrap();
            let b = t.scale_by(a, v[2]).unwrap();
            project(t, b, 33)
        });
    }

    #[test]
    fn top_k_gate_gradients() {
        check(&[rand(&[3, 4], 40)], |t, v| {
            let p = t.softmax(v[0], 1).unwrap();
            let g = t.top_k_gates(p, &[vec![0, 2], vec![3, 1], vec![1, 0]]).unwrap();
            project(t, g, 41)
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        check(&[rand(&[3, 5], 50)], |t, v| t.cross_entropy(v[0], &[4, 0, 2]).unwrap());
    }

    #[test]
    fn hyperbolic_op_gradients() {
        check(&[rand(&[2, 3], 60)], |t, v| {
            let x = t.exp_map_origin(v[0], 1.3, 10.0).unwrap();
            let y = t.log_map_origin(x, 1.3).unwrap();
            let s = t.scale(y, 0.5).unwrap();
            project(t, s, 61)
        });
        check(&[rand(&[1, 3], 62), rand(&[1, 3], 63)], |t, v| {
            let a = t.exp_map_origin(v[0], 1.0, 10.0).unwrap();
            let b = t.exp_map_origin(v[1], 1.0, 10.0).unwrap();
            t.lorentz_distance_sq(a, b, 1.0).unwrap()
        });
    }

    #[test]
    fn deterministic_replay() {
        let run = || {
            let mut t = Tape::new();
            let a = t.leaf(rand(&[4, 4], 70), true);
            let b = t.softmax(a, 1).unwrap();
            let c = t.matmul(b, a).unwrap();
            let s = t.sum(c).unwrap();
            let g = t.backward(s).unwrap();
            (t.value(s).item().to_bits(), g.get(a).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
