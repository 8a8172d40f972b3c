//! Reverse-mode differentiation over a recorded list of operations.
//!
//! A [`Tape`] records every value produced during a forward pass together
//! with the operation that produced it. [`Tape::backward`] walks the record
//! in reverse and returns the gradient of a scalar with respect to every
//! recorded value, leaves and intermediates alike.

use rand::Rng;

use super::kernels::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Gelu(Var),
    Relu(Var),
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ReplaceRows {
        x: Var,
        row: Var,
        rows: Vec<bool>,
    },
    MeanRows(Var),
    Mix {
        taps: Vec<Var>,
        weights: Var,
    },
    Sum(Var),
    MaskedCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        rows: Vec<bool>,
        probs: Tensor,
        count: usize,
    },
    KlDiv {
        student: Var,
        teacher_probs: Tensor,
        student_probs: Tensor,
        tau: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(..) => "softmax",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Dropout { .. } => "dropout",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::Mix { .. } => "mix",
            Op::Sum(..) => "sum",
            Op::MaskedCrossEntropy { .. } => "masked_cross_entropy",
            Op::KlDiv { .. } => "kl_div",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(String, usize)>,
}

/// Gradients of one scalar with respect to every value on a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the value does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

/// Row-wise softmax of `logits / tau`.
pub fn softmax_rows(logits: &Tensor, tau: f64) -> Tensor {
    let mut out = Tensor::zeros_like(logits);
    let scaled = if tau == 1.0 {
        logits.clone()
    } else {
        logits.map(|v| v / tau)
    };
    for r in 0..logits.rows() {
        softmax_row(scaled.row(r), out.row_mut(r));
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let id = self.nodes.len();
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some((op.name().to_string(), id));
        }
        self.nodes.push(Node { value, op });
        Var(id)
    }

    /// Error naming the first operation that produced a non-finite value.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            None => Ok(()),
            Some((op, id)) => Err(Error::Numeric {
                op: op.clone(),
                detail: format!("non-finite value in node {id}"),
            }),
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), Layout::Normal, bv.data(), Layout::Normal, &mut out);
        self.push(Tensor::from_rows(m, n, out), Op::MatMul(a, b))
    }

    /// `a (m x k) * b^T` where `b` is `n x k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(k, bv.cols(), "matmul_bt inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), Layout::Normal, bv.data(), Layout::Transposed, &mut out);
        self.push(Tensor::from_rows(m, n, out), Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!(b.len(), out.cols(), "add_row width");
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Per-row normalization followed by a learned affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut normed = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = normed.clone();
        for r in 0..rows {
            for ((o, gg), bb) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x), 1.0);
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Inverted dropout. With `rng = None` (inference) or `p = 0` this is
    /// the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout probability {p} not in [0, 1)")));
        }
        let rng = match rng {
            Some(rng) if p > 0.0 => rng,
            _ => return Ok(x),
        };
        let scale = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let keep: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data = xv.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let out = Tensor::from_rows(xv.rows(), xv.cols(), data);
        Ok(self.push(out, Op::Dropout { x, keep }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols range");
        let idx: Vec<usize> = (start..start + len).collect();
        let out = xv.select_cols(&idx);
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols rows");
                out.extend_from_slice(pv.row(r));
            }
        }
        self.push(Tensor::from_rows(rows, cols, out), Op::ConcatCols(parts.to_vec()))
    }

    /// Rows of `x` flagged in `rows` are replaced by the `1 x n` vector `row`.
    pub fn replace_rows(&mut self, x: Var, row: Var, rows: &[bool]) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(rows.len(), out.rows(), "replace_rows flags");
        let rv = self.value(row).data().to_vec();
        for (r, &flag) in rows.iter().enumerate() {
            if flag {
                out.row_mut(r).copy_from_slice(&rv);
            }
        }
        self.push(
            out,
            Op::ReplaceRows {
                x,
                row,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = vec![0.0; xv.cols()];
        for r in 0..xv.rows() {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let n = xv.rows() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.push(Tensor::row_vector(out), Op::MeanRows(x))
    }

    /// `sum_l weights[l] * taps[l]` with `weights` a `1 x L` row.
    pub fn mix(&mut self, taps: &[Var], weights: Var) -> Var {
        let w = self.value(weights).data().to_vec();
        assert_eq!(w.len(), taps.len(), "mix weight count");
        let mut out = Tensor::zeros_like(self.value(taps[0]));
        for (&t, &wl) in taps.iter().zip(&w) {
            for (o, v) in out.data_mut().iter_mut().zip(self.value(t).data()) {
                *o += wl * v;
            }
        }
        self.push(
            out,
            Op::Mix {
                taps: taps.to_vec(),
                weights,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean cross-entropy over the rows flagged in `rows`.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[usize], rows: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() || rows.len() != lv.rows() {
            return Err(Error::shape(format!(
                "{} logit rows, {} labels, {} mask flags",
                lv.rows(),
                labels.len(),
                rows.len()
            )));
        }
        let count = rows.iter().filter(|&&f| f).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::contract(format!("label {bad} out of range for {} classes", lv.cols())));
        }
        let probs = softmax_rows(lv, 1.0);
        let mut loss = 0.0;
        for (r, (&label, &flag)) in labels.iter().zip(rows).enumerate() {
            if flag {
                let row = lv.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[label];
            }
        }
        loss /= count as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy {
                logits,
                labels: labels.to_vec(),
                rows: rows.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Mean over rows of `tau^2 * KL(softmax(t/tau) || softmax(s/tau))`.
    /// The teacher logits are constants; only `student` receives gradient.
    pub fn kl_div(&mut self, teacher_logits: &Tensor, student: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::contract(format!("temperature {tau} must be positive")));
        }
        let sv = self.value(student);
        if sv.shape() != teacher_logits.shape() {
            return Err(Error::shape(format!(
                "teacher logits {:?} vs student logits {:?}",
                teacher_logits.shape(),
                sv.shape()
            )));
        }
        let teacher_probs = softmax_rows(teacher_logits, tau);
        let student_probs = softmax_rows(sv, tau);
        let log_softmax = |x: &[f64]| -> Vec<f64> {
            let max = x.iter().map(|v| v / tau).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v / tau - max).exp()).sum::<f64>().ln();
            x.iter().map(|v| v / tau - lse).collect()
        };
        let mut total = 0.0;
        for r in 0..sv.rows() {
            let lp = log_softmax(teacher_logits.row(r));
            let lq = log_softmax(sv.row(r));
            for ((p, a), b) in teacher_probs.row(r).iter().zip(&lp).zip(&lq) {
                if *p > 0.0 {
                    total += p * (a - b);
                }
            }
        }
        let loss = tau * tau * total / sv.rows() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
                tau,
            },
        ))
    }

    /// Gradient of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if !g.is_finite() {
                return Err(Error::Numeric {
                    op: node.op.name().to_string(),
                    detail: format!("non-finite gradient at node {i}"),
                });
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
            grads[v.0].get_or_insert_with(|| Tensor::zeros_like(like))
        }
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let ga = slot(grads, *a, av);
                gemm(m, n, k, g.data(), Layout::Normal, bv.data(), Layout::Transposed, ga.data_mut());
                let gb = slot(grads, *b, bv);
                gemm(k, m, n, av.data(), Layout::Transposed, g.data(), Layout::Normal, gb.data_mut());
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                let ga = slot(grads, *a, av);
                gemm(m, n, k, g.data(), Layout::Normal, bv.data(), Layout::Normal, ga.data_mut());
                let gb = slot(grads, *b, bv);
                gemm(n, m, k, g.data(), Layout::Transposed, av.data(), Layout::Normal, gb.data_mut());
            }
            Op::Add(a, b) => {
                slot(grads, *a, g).add_assign(g);
                slot(grads, *b, g).add_assign(g);
            }
            Op::AddRow(x, bias) => {
                slot(grads, *x, g).add_assign(g);
                let gb = slot(grads, *bias, self.value(*bias));
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, *x, g);
                for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += s * v;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gamma).data().to_vec();
                let cols = g.cols();
                {
                    let gg = slot(grads, *gamma, self.value(*gamma));
                    for r in 0..g.rows() {
                        for ((o, gr), nr) in gg.data_mut().iter_mut().zip(g.row(r)).zip(normed.row(r)) {
                            *o += gr * nr;
                        }
                    }
                }
                {
                    let gb = slot(grads, *beta, self.value(*beta));
                    for r in 0..g.rows() {
                        for (o, gr) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gr;
                        }
                    }
                }
                let gx = slot(grads, *x, g);
                let n = cols as f64;
                let mut dxhat = vec![0.0; cols];
                for r in 0..g.rows() {
                    for ((d, gr), gm) in dxhat.iter_mut().zip(g.row(r)).zip(&gv) {
                        *d = gr * gm;
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(normed.row(r)).map(|(d, x)| d * x).sum();
                    let inv = inv_std[r];
                    for ((o, d), xh) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(normed.row(r)) {
                        *o += inv / n * (n * d - sum_d - xh * sum_dx);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let gx = slot(grads, *x, g);
                for r in 0..g.rows() {
                    let (p, gr) = (out.row(r), g.row(r));
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, pp), gg) in gx.row_mut(r).iter_mut().zip(p).zip(gr) {
                        *o += pp * (gg - dot);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, g);
                for ((o, &v), gg) in gx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *o += gg * d;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, g);
                for ((o, &v), gg) in gx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                    if v > 0.0 {
                        *o += gg;
                    }
                }
            }
            Op::Dropout { x, keep } => {
                let gx = slot(grads, *x, g);
                for ((o, k), gg) in gx.data_mut().iter_mut().zip(keep).zip(g.data()) {
                    *o += k * gg;
                }
            }
            Op::SliceCols { x, start } => {
                let gx = slot(grads, *x, self.value(*x));
                for r in 0..g.rows() {
                    let dst = &mut gx.row_mut(r)[*start..*start + g.cols()];
                    for (o, gg) in dst.iter_mut().zip(g.row(r)) {
                        *o += gg;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let gp = slot(grads, p, pv);
                    for r in 0..g.rows() {
                        for (o, gg) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                            *o += gg;
                        }
                    }
                    offset += w;
                }
            }
            Op::ReplaceRows { x, row, rows } => {
                {
                    let gx = slot(grads, *x, g);
                    for (r, &flag) in rows.iter().enumerate() {
                        if !flag {
                            for (o, gg) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o += gg;
                            }
                        }
                    }
                }
                let gr = slot(grads, *row, self.value(*row));
                for (r, &flag) in rows.iter().enumerate() {
                    if flag {
                        for (o, gg) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gg;
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = xv.rows() as f64;
                let gx = slot(grads, *x, xv);
                for r in 0..gx.rows() {
                    for (o, gg) in gx.row_mut(r).iter_mut().zip(g.data()) {
                        *o += gg / n;
                    }
                }
            }
            Op::Mix { taps, weights } => {
                let w = self.value(*weights).data().to_vec();
                let dw: Vec<f64> = taps
                    .iter()
                    .map(|&t| self.value(t).data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
                    .collect();
                for (&t, &wl) in taps.iter().zip(&w) {
                    let gt = slot(grads, t, g);
                    for (o, gg) in gt.data_mut().iter_mut().zip(g.data()) {
                        *o += wl * gg;
                    }
                }
                let gw = slot(grads, *weights, self.value(*weights));
                for (o, d) in gw.data_mut().iter_mut().zip(dw) {
                    *o += d;
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                let gx = slot(grads, *x, self.value(*x));
                gx.data_mut().iter_mut().for_each(|o| *o += s);
            }
            Op::MaskedCrossEntropy {
                logits,
                labels,
                rows,
                probs,
                count,
            } => {
                let s = g.item() / *count as f64;
                let gl = slot(grads, *logits, probs);
                for (r, (&label, &flag)) in labels.iter().zip(rows).enumerate() {
                    if flag {
                        let dst = gl.row_mut(r);
                        for (o, p) in dst.iter_mut().zip(probs.row(r)) {
                            *o += s * p;
                        }
                        dst[label] -= s;
                    }
                }
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
                tau,
            } => {
                let s = g.item() * tau / student_probs.rows() as f64;
                let gs = slot(grads, *student, student_probs);
                for ((o, q), p) in gs.data_mut().iter_mut().zip(student_probs.data()).zip(teacher_probs.data()) {
                    *o += s * (q - p);
                }
            }
        }
    }
}
