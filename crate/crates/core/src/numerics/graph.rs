//! Reverse-mode differentiation over 2-D matrices.
//!
//! A [`Graph`] records every operation of one forward evaluation. Parameter
//! leaves borrow their storage from a [`ParamStore`] instead of copying it,
//! so a table used twice (an embedding lookup and a tied output head) is
//! the same memory and receives the sum of both gradient contributions.

use super::tensor::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather { table: Var, idx: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// One forward evaluation, recorded for backpropagation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.value(v).to_vec())
            .unwrap_or_else(|_| Tensor::filled(vec![r, c], f64::NAN))
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            rows,
            cols,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(Error::shape(format!(
                "input of {rows}x{cols} needs {} values, got {}",
                rows * cols,
                value.len()
            )));
        }
        Ok(self.push(rows, cols, value, Op::Input))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id);
        self.push(t.rows(), t.cols(), Vec::new(), Op::Param(id))
    }

    /// Row lookup: output row `i` is `table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "row index {bad} out of range for table with {rows} rows"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            idx.len(),
            cols,
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    /// Adds a single row `b` (1 x c) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            return Err(Error::shape(format!(
                "row broadcast of {:?} onto {r}x{c}",
                self.shape(b)
            )));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bv).for_each(|(x, y)| *x += y);
        }
        Ok(self.push(r, c, out, Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push(r, c, out, Op::Scale(a, factor))
    }

    /// `a (n x k) * b (k x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a), self.value(b), &mut out, n, k, m);
        Ok(self.push(n, m, out, Op::MatMul(a, b)))
    }

    /// `a (n x k) * b^T` where `b` is `m x k`; used by the tied heads.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_bt {n}x{k} by ({m}x{k2})^T"
            )));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(n, m, out, Op::MatMulBt(a, b)))
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(r, c, out, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        self.push(r, c, out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with learned gain and bias (both 1 x c).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::shape("layer norm gain/bias width".to_string()));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head causal self-attention over packed projections.
    ///
    /// `qkv` is `T x 3d` holding queries, keys and values side by side;
    /// the result is `T x d`. Position `t` attends to positions `<= t` only.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (t_len, width) = self.shape(qkv);
        if heads == 0 || width % (3 * heads) != 0 {
            return Err(Error::shape(format!(
                "attention width {width} not divisible into 3 x {heads} heads"
            )));
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let v = self.value(qkv);
        let mut probs = vec![0.0; heads * t_len * t_len];
        let mut out = vec![0.0; t_len * d];
        let mut scores = vec![0.0; t_len];
        for h in 0..heads {
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            for t in 0..t_len {
                let q = &v[t * width + qo..t * width + qo + dh];
                let mut max = f64::NEG_INFINITY;
                for u in 0..=t {
                    let k = &v[u * width + ko..u * width + ko + dh];
                    let s = dot(q, k) * scale;
                    scores[u] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(t + 1) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let orow = &mut out[t * d + qo..t * d + qo + dh];
                for u in 0..=t {
                    let p = scores[u] / z;
                    prow[u] = p;
                    let val = &v[u * width + vo..u * width + vo + dh];
                    orow.iter_mut().zip(val).for_each(|(o, x)| *o += p * x);
                }
            }
        }
        Ok(self.push(t_len, d, out, Op::Attention { qkv, heads, probs }))
    }

    /// Horizontal concatenation; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat of zero parts"));
        };
        let rows = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::shape("concat_cols row counts differ".to_string()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical concatenation; all parts need the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat of zero parts"));
        };
        let cols = self.shape(first).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::shape("concat_rows column counts differ".to_string()));
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + count > r || count == 0 {
            return Err(Error::shape(format!(
                "rows {start}..{} of a {r}-row matrix",
                start + count
            )));
        }
        let out = self.value(x)[start * c..(start + count) * c].to_vec();
        Ok(self.push(count, c, out, Op::SliceRows { x, start }))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(1, c, out, Op::MeanRows(x))
    }

    /// Mean over rows of `-ln softmax(logits_i)[targets_i]`, as a 1x1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::shape(format!(
                "{} targets for {r} logit rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("target {t} out of range 0..{c}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let p = &mut probs[i * c..(i + 1) * c];
            let lse = log_sum_exp_into(row, p);
            loss += lse - row[targets[i]];
        }
        let loss = loss / r as f64;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Element-wise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("sum of zero parts"));
        };
        let (r, c) = self.shape(first);
        if parts.iter().any(|&p| self.shape(p) != (r, c)) {
            return Err(Error::shape("sum of differently shaped nodes".to_string()));
        }
        let mut out = vec![0.0; r * c];
        for &p in parts {
            out.iter_mut().zip(self.value(p)).for_each(|(o, v)| *o += v);
        }
        Ok(self.push(r, c, out, Op::Sum(parts.to_vec())))
    }

    /// Accumulates `d loss / d param` into `grads` for every parameter the
    /// loss depends on. `loss` must be a 1x1 node.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward needs a scalar loss".to_string()));
        }
        let mut node_grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        node_grads[loss.0] = vec![1.0];

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || node_grads[i].is_empty() {
                continue;
            }
            let gout = std::mem::take(&mut node_grads[i]);
            let mut ctx = BackCtx {
                graph: self,
                node_grads: &mut node_grads,
                grads,
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    ctx.grads
                        .get_mut(*id)
                        .iter_mut()
                        .zip(&gout)
                        .for_each(|(g, v)| *g += v);
                }
                Op::Gather { table, idx } => {
                    let c = node.cols;
                    if let Some(slot) = ctx.slot(*table) {
                        for (row, &t) in idx.iter().enumerate() {
                            let dst = &mut slot[t * c..(t + 1) * c];
                            dst.iter_mut()
                                .zip(&gout[row * c..(row + 1) * c])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(slot) = ctx.slot(v) {
                            slot.iter_mut().zip(&gout).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if let Some(slot) = ctx.slot(*a) {
                        slot.iter_mut().zip(&gout).for_each(|(d, g)| *d += g);
                    }
                    let c = node.cols;
                    if let Some(slot) = ctx.slot(*b) {
                        for row in gout.chunks(c) {
                            slot.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Scale(a, f) => {
                    if let Some(slot) = ctx.slot(*a) {
                        slot.iter_mut().zip(&gout).for_each(|(d, g)| *d += f * g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.shape(*a);
                    let m = node.cols;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if let Some(slot) = ctx.slot(*a) {
                        // dA = dC * B^T
                        for i in 0..n {
                            let gr = &gout[i * m..(i + 1) * m];
                            for p in 0..k {
                                slot[i * k + p] += dot(gr, &bv[p * m..(p + 1) * m]);
                            }
                        }
                    }
                    if let Some(slot) = ctx.slot(*b) {
                        // dB = A^T * dC
                        for i in 0..n {
                            let gr = &gout[i * m..(i + 1) * m];
                            for p in 0..k {
                                let a_ip = av[i * k + p];
                                if a_ip != 0.0 {
                                    axpy(a_ip, gr, &mut slot[p * m..(p + 1) * m]);
                                }
                            }
                        }
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (n, k) = self.shape(*a);
                    let m = node.cols;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if let Some(slot) = ctx.slot(*a) {
                        for i in 0..n {
                            for j in 0..m {
                                let g = gout[i * m + j];
                                if g != 0.0 {
                                    axpy(g, &bv[j * k..(j + 1) * k], &mut slot[i * k..(i + 1) * k]);
                                }
                            }
                        }
                    }
                    if let Some(slot) = ctx.slot(*b) {
                        for i in 0..n {
                            for j in 0..m {
                                let g = gout[i * m + j];
                                if g != 0.0 {
                                    axpy(g, &av[i * k..(i + 1) * k], &mut slot[j * k..(j + 1) * k]);
                                }
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    if let Some(slot) = ctx.slot(*a) {
                        for ((d, g), y) in slot.iter_mut().zip(&gout).zip(y) {
                            *d += g * (1.0 - y * y);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    if let Some(slot) = ctx.slot(*a) {
                        for ((d, g), &x) in slot.iter_mut().zip(&gout).zip(xv) {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            *d += g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (r, c) = (node.rows, node.cols);
                    let gv = self.value(*gain).to_vec();
                    if let Some(slot) = ctx.slot(*gain) {
                        for i in 0..r {
                            for j in 0..c {
                                slot[j] += gout[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    if let Some(slot) = ctx.slot(*bias) {
                        for row in gout.chunks(c) {
                            slot.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    }
                    if let Some(slot) = ctx.slot(*x) {
                        let mut dxhat = vec![0.0; c];
                        for i in 0..r {
                            let xh = &xhat[i * c..(i + 1) * c];
                            for j in 0..c {
                                dxhat[j] = gout[i * c + j] * gv[j];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>()
                                / c as f64;
                            for j in 0..c {
                                slot[i * c + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                            }
                        }
                    }
                }
                Op::Attention { qkv, heads, probs } => {
                    let (t_len, width) = self.shape(*qkv);
                    let d = width / 3;
                    let heads = *heads;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let v = self.value(*qkv);
                    if let Some(slot) = ctx.slot(*qkv) {
                        let mut dp = vec![0.0; t_len];
                        for h in 0..heads {
                            let qo = h * dh;
                            let ko = d + h * dh;
                            let vo = 2 * d + h * dh;
                            for t in 0..t_len {
                                let prow = &probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                                let go = &gout[t * d + qo..t * d + qo + dh];
                                let mut weighted = 0.0;
                                for u in 0..=t {
                                    let val = &v[u * width + vo..u * width + vo + dh];
                                    dp[u] = dot(go, val);
                                    weighted += prow[u] * dp[u];
                                    // dV
                                    axpy(prow[u], go, &mut slot[u * width + vo..u * width + vo + dh]);
                                }
                                for u in 0..=t {
                                    let ds = prow[u] * (dp[u] - weighted) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    // dQ_t += ds * K_u ; dK_u += ds * Q_t
                                    for j in 0..dh {
                                        let kq = v[u * width + ko + j];
                                        let qv = v[t * width + qo + j];
                                        slot[t * width + qo + j] += ds * kq;
                                        slot[u * width + ko + j] += ds * qv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.rows;
                    let total = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        if let Some(slot) = ctx.slot(p) {
                            for i in 0..rows {
                                let src = &gout[i * total + offset..i * total + offset + c];
                                slot[i * c..(i + 1) * c]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, g)| *d += g);
                            }
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if let Some(slot) = ctx.slot(p) {
                            slot.iter_mut()
                                .zip(&gout[offset..offset + n])
                                .for_each(|(d, g)| *d += g);
                        }
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = node.cols;
                    if let Some(slot) = ctx.slot(*x) {
                        slot[start * c..start * c + gout.len()]
                            .iter_mut()
                            .zip(&gout)
                            .for_each(|(d, g)| *d += g);
                    }
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.shape(*x);
                    if let Some(slot) = ctx.slot(*x) {
                        for row in slot.chunks_mut(c) {
                            row.iter_mut()
                                .zip(&gout)
                                .for_each(|(d, g)| *d += g / r as f64);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (r, c) = self.shape(*logits);
                    let g = gout[0] / r as f64;
                    if let Some(slot) = ctx.slot(*logits) {
                        for i in 0..r {
                            for j in 0..c {
                                let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                                slot[i * c + j] += g * (probs[i * c + j] - onehot);
                            }
                        }
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        if let Some(slot) = ctx.slot(p) {
                            slot.iter_mut().zip(&gout).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

struct BackCtx<'a, 'g> {
    graph: &'a Graph<'g>,
    node_grads: &'a mut Vec<Vec<f64>>,
    grads: &'a mut Gradients,
}

impl BackCtx<'_, '_> {
    /// Gradient buffer for `v`: the parameter's own buffer for parameter
    /// leaves, a lazily zeroed node buffer otherwise, `None` when no
    /// parameter lies upstream.
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.graph.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        if let Op::Param(id) = node.op {
            return Some(self.grads.get_mut(id));
        }
        let buf = &mut self.node_grads[v.0];
        if buf.is_empty() {
            *buf = vec![0.0; node.rows * node.cols];
        }
        Some(buf.as_mut_slice())
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => Vec::new(),
        Op::Gather { table, .. } => vec![*table],
        Op::Add(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) | Op::MatMulBt(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Tanh(a) | Op::Gelu(a) | Op::MeanRows(a) => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Attention { qkv, .. } => vec![*qkv],
        Op::ConcatCols(p) | Op::ConcatRows(p) | Op::Sum(p) => p.clone(),
        Op::SliceRows { x, .. } => vec![*x],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                axpy(a_ip, &b[p * m..(p + 1) * m], orow);
            }
        }
    }
}

/// Writes softmax(row) into `probs` and returns log-sum-exp(row).
fn log_sum_exp_into(row: &[f64], probs: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &x) in probs.iter_mut().zip(row) {
        *p = (x - max).exp();
        z += *p;
    }
    probs.iter_mut().for_each(|p| *p /= z);
    max + z.ln()
}
