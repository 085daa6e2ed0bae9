//! Reverse-mode automatic differentiation over a per-step Wengert list.
//!
//! A [`Tape`] records every primitive applied during a forward pass together
//! with the values it produced. [`Tape::backward`] then walks the list once in
//! reverse, accumulating gradients into the nodes that require them. Tapes are
//! built fresh for each training step and dropped afterwards.

use super::tensor::{
    elu_plus_one, elu_plus_one_grad, gelu, gelu_grad, gemm, row_moments,
    softmax_in_place, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Gelu(Var),
    EluPlusOne(Var),
    SoftmaxRows { a: Var, scale: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    Conv1d { x: Var, kernel: Var, bias: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    NegSqDist { q: Var, k: Var, log_gamma: Var },
    ColSum(Var),
    DivRows { num: Var, den: Var },
    BarNll { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient slice, or `None` when nothing flowed into `v`.
    pub fn slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = super::tensor::matmul_t(self.value(a), ta, self.value(b), tb)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err("add", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err("mul", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let c = va.cols();
        if vb.len() != c {
            return Err(dim_err("add_bias", va, vb));
        }
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddBias { a, bias }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        let out = self.value(a).map(elu_plus_one);
        let ng = self.ng(a);
        self.push(out, Op::EluPlusOne(a), ng)
    }

    /// Row softmax of `scale * a`.
    pub fn softmax_rows(&mut self, a: Var, scale: f64) -> Result<Var> {
        let va = self.value(a);
        if !va.is_finite() {
            return Err(Error::Numeric("non-finite softmax input".into()));
        }
        let mut out = va.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row, scale);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SoftmaxRows { a, scale }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(dim_err("layer_norm", vx, self.value(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vx.clone();
        let mut rstds = Vec::with_capacity(vx.rows());
        for row in out.data_mut().chunks_mut(d) {
            let (mean, rstd) = row_moments(row);
            rstds.push(rstd);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd: rstds,
            },
            ng,
        ))
    }

    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = super::tensor::conv1d_depthwise(self.value(x), self.value(kernel), self.value(bias))?;
        let ng = self.ng(x) || self.ng(kernel) || self.ng(bias);
        Ok(self.push(out, Op::Conv1d { x, kernel, bias }, ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.rows() {
            return Err(Error::Contract(format!(
                "slice_rows {start}+{len} out of {} rows",
                va.rows()
            )));
        }
        let out = va.slice_rows(start, len);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows { a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if start + len > c {
            return Err(Error::Contract(format!("slice_cols {start}+{len} out of {c} cols")));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in va.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_vec(r, len, data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(dim_err("concat_rows", self.value(parts[0]), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != r {
                return Err(dim_err("concat_cols", self.value(parts[0]), v));
            }
            total += v.cols();
        }
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for i in 0..r {
                data[i * total + off..i * total + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_vec(r, total, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// `out[i, j] = -exp(log_gamma) * ||q_i - k_j||^2`.
    pub fn neg_sq_dist(&mut self, q: Var, k: Var, log_gamma: Var) -> Result<Var> {
        let (vq, vk) = (self.value(q), self.value(k));
        if vq.cols() != vk.cols() {
            return Err(dim_err("neg_sq_dist", vq, vk));
        }
        let gamma = self.value(log_gamma).data()[0].exp();
        let (m, n, d) = (vq.rows(), vk.rows(), vq.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let qi = vq.row(i);
            for j in 0..n {
                let kj = vk.row(j);
                let mut s = 0.0;
                for c in 0..d {
                    let diff = qi[c] - kj[c];
                    s += diff * diff;
                }
                out[i * n + j] = -gamma * s;
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(log_gamma);
        Ok(self.push(Tensor::from_vec(m, n, out), Op::NegSqDist { q, k, log_gamma }, ng))
    }

    /// Column sums as a `1 × cols` row.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut out = vec![0.0; c];
        for row in va.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(1, c, out), Op::ColSum(a), ng)
    }

    /// Divides each row of `num` by the matching entry of the `rows × 1` column `den`.
    pub fn div_rows(&mut self, num: Var, den: Var) -> Result<Var> {
        let (vn, vd) = (self.value(num), self.value(den));
        if vd.len() != vn.rows() {
            return Err(dim_err("div_rows", vn, vd));
        }
        if let Some(bad) = vd.data().iter().find(|d| d.abs() < 1e-12) {
            return Err(Error::Numeric(format!("row normalizer {bad:e} below 1e-12")));
        }
        let c = vn.cols();
        let mut out = vn.clone();
        for (row, d) in out.data_mut().chunks_mut(c).zip(vd.data()) {
            for v in row.iter_mut() {
                *v /= d;
            }
        }
        let ng = self.ng(num) || self.ng(den);
        Ok(self.push(out, Op::DivRows { num, den }, ng))
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i] + log_widths[targets_i]`:
    /// the bar-distribution negative log density under the Riemann convention.
    pub fn bar_nll(&mut self, logits: Var, targets: &[usize], log_widths: &[f64]) -> Result<Var> {
        let vl = self.value(logits);
        let (m, b) = (vl.rows(), vl.cols());
        if targets.len() != m || log_widths.len() != b {
            return Err(Error::Dimension {
                op: "bar_nll",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len(), log_widths.len()],
            });
        }
        let mut probs = vl.data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(b).enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let t = targets[i];
            total += lse - row[t] + log_widths[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / m as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BarNll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Reverse sweep from a scalar `loss`; each node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (out.rows(), out.cols());
                let k = if *ta { va.rows() } else { va.cols() };
                // C = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G.
                self.accumulate(grads, *a, |ga| {
                    if *ta {
                        // dA (k×m) = op(B) G^T
                        gemm(k, n, m, vb.data(), *tb, g, true, ga, 1.0);
                    } else {
                        gemm(m, n, k, g, false, vb.data(), !*tb, ga, 1.0);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    if *tb {
                        // dB (n×k) = G^T op(A)
                        gemm(n, m, k, g, true, va.data(), *ta, gb, 1.0);
                    } else {
                        gemm(k, m, n, va.data(), !*ta, g, false, gb, 1.0);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |ga| {
                        for (x, y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddBias { a, bias } => {
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                let c = out.cols();
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(c) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Scale { a, c } => self.accumulate(grads, *a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            }),
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_grad(va[i]);
                    }
                });
            }
            Op::EluPlusOne(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * elu_plus_one_grad(va[i]);
                    }
                });
            }
            Op::SoftmaxRows { a, scale } => {
                let c = out.cols();
                self.accumulate(grads, *a, |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for j in 0..c {
                            gr[j] += scale * yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let vx = self.value(*x);
                let gamma = self.value(*gain).data();
                let d = vx.cols();
                let dn = d as f64;
                // normalized inputs, recomputed from the cached statistics
                let mut xhat = vx.data().to_vec();
                for (row, r) in xhat.chunks_mut(d).zip(rstd) {
                    let mean = row.iter().sum::<f64>() / dn;
                    for v in row.iter_mut() {
                        *v = (*v - mean) * r;
                    }
                }
                self.accumulate(grads, *gain, |gg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for (((gxr, gr), xr), r) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).zip(rstd) {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gamma[j];
                            s1 += dxh;
                            s2 += dxh * xr[j];
                        }
                        for j in 0..d {
                            let dxh = gr[j] * gamma[j];
                            gxr[j] += r / dn * (dn * dxh - s1 - xr[j] * s2);
                        }
                    }
                });
            }
            Op::Conv1d { x, kernel, bias } => {
                let vx = self.value(*x).data();
                let vk = self.value(*kernel);
                let (n, d, k) = (out.rows(), out.cols(), vk.rows());
                let half = k as isize / 2;
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(d) {
                        for c in 0..d {
                            gb[c] += row[c];
                        }
                    }
                });
                self.accumulate(grads, *kernel, |gk| {
                    for row in 0..n {
                        for t in 0..k {
                            let src = row as isize + t as isize - half;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let s = src as usize;
                            for c in 0..d {
                                gk[t * d + c] += g[row * d + c] * vx[s * d + c];
                            }
                        }
                    }
                });
                let kd = vk.data();
                self.accumulate(grads, *x, |gx| {
                    for row in 0..n {
                        for t in 0..k {
                            let src = row as isize + t as isize - half;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let s = src as usize;
                            for c in 0..d {
                                gx[s * d + c] += g[row * d + c] * kd[t * d + c];
                            }
                        }
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let c = out.cols();
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let len = out.cols();
                let c = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| {
                    for (gr, dr) in ga.chunks_mut(c).zip(g.chunks(len)) {
                        for (x, y) in gr[*start..start + len].iter_mut().zip(dr) {
                            *x += y;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |gp| {
                        for (x, y) in gp.iter_mut().zip(&g[off..off + len]) {
                            *x += y;
                        }
                    });
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for (gr, dr) in gp.chunks_mut(c).zip(g.chunks(total)) {
                            for (x, y) in gr.iter_mut().zip(&dr[off..off + c]) {
                                *x += y;
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::NegSqDist { q, k, log_gamma } => {
                let (vq, vk) = (self.value(*q), self.value(*k));
                let (m, n, d) = (vq.rows(), vk.rows(), vq.cols());
                let gamma = self.value(*log_gamma).data()[0].exp();
                // d out_ij / d q_i = -2 gamma (q_i - k_j); d out_ij / d k_j = +2 gamma (q_i - k_j)
                let row_sums: Vec<f64> = g.chunks(n).map(|r| r.iter().sum()).collect();
                let mut col_sums = vec![0.0; n];
                for r in g.chunks(n) {
                    for (c, v) in col_sums.iter_mut().zip(r) {
                        *c += v;
                    }
                }
                self.accumulate(grads, *q, |gq| {
                    // -2γ (rowsum ⊙ Q - G K)
                    let mut gk = vec![0.0; m * d];
                    gemm(m, n, d, g, false, vk.data(), false, &mut gk, 0.0);
                    for i in 0..m {
                        for c in 0..d {
                            gq[i * d + c] += -2.0 * gamma * (row_sums[i] * vq.get(i, c) - gk[i * d + c]);
                        }
                    }
                });
                self.accumulate(grads, *k, |gkk| {
                    // 2γ (G^T Q - colsum ⊙ K)
                    let mut gtq = vec![0.0; n * d];
                    gemm(n, m, d, g, true, vq.data(), false, &mut gtq, 0.0);
                    for j in 0..n {
                        for c in 0..d {
                            gkk[j * d + c] += 2.0 * gamma * (gtq[j * d + c] - col_sums[j] * vk.get(j, c));
                        }
                    }
                });
                self.accumulate(grads, *log_gamma, |gl| {
                    gl[0] += g.iter().zip(out.data()).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::ColSum(a) => {
                let c = out.cols();
                self.accumulate(grads, *a, |ga| {
                    for row in ga.chunks_mut(c) {
                        for (x, y) in row.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                });
            }
            Op::DivRows { num, den } => {
                let vd = self.value(*den).data();
                let c = out.cols();
                self.accumulate(grads, *num, |gn| {
                    for ((gr, dr), d) in gn.chunks_mut(c).zip(g.chunks(c)).zip(vd) {
                        for (x, y) in gr.iter_mut().zip(dr) {
                            *x += y / d;
                        }
                    }
                });
                self.accumulate(grads, *den, |gd| {
                    for (i, (dr, orow)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                        let s: f64 = dr.iter().zip(orow).map(|(a, b)| a * b).sum();
                        gd[i] -= s / vd[i];
                    }
                });
            }
            Op::BarNll { logits, targets, probs } => {
                let b = self.value(*logits).cols();
                let m = targets.len() as f64;
                let scale = g[0] / m;
                self.accumulate(grads, *logits, |gl| {
                    for (i, (gr, pr)) in gl.chunks_mut(b).zip(probs.chunks(b)).enumerate() {
                        for j in 0..b {
                            gr[j] += scale * pr[j];
                        }
                        gr[targets[i]] -= scale;
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
        }
    }
}
