//! Differentiable operations. Each forward method on [`Graph`] validates
//! shapes, computes the value and records an [`Op`] carrying whatever the
//! backward pass needs.

use rand::Rng as _;
use rayon::prelude::*;

use super::kernels::{column_sums, gemm, gt_times_x, rows_times_w, rows_times_wt, sum_in_order, Mat};
use super::{Graph, Node, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    AddConst(Var),
    Reshape(Var),
    Transpose12(Var),
    Relu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    MaxOverSeq { x: Var, argmax: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize },
    L1Loss { pred: Var, target: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![*a, *b],
            Op::AddConst(x)
            | Op::Reshape(x)
            | Op::Transpose12(x)
            | Op::Relu(x)
            | Op::Dropout { x, .. }
            | Op::MaxPool1d { x, .. }
            | Op::MaxOverSeq { x, .. }
            | Op::Softmax { x, .. }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::Conv1d { x, w, b } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::L1Loss { pred, .. } => vec![*pred],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub(crate) fn backward(
        &self,
        nodes: &[Node],
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let val = |v: &Var| &nodes[v.0].value;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for p in [a, b] {
                    if wants(p) {
                        accumulate(grads, nodes, *p, |d| add_into(d, g));
                    }
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                accumulate(grads, nodes, *x, |d| add_into(d, g));
            }
            Op::Transpose12(x) => {
                let s = val(x).shape();
                let (b, c, l) = (s[0], s[1], s[2]);
                accumulate(grads, nodes, *x, |d| {
                    for bi in 0..b {
                        for ci in 0..c {
                            for li in 0..l {
                                d[(bi * c + ci) * l + li] += g[(bi * l + li) * c + ci];
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(x).data();
                accumulate(grads, nodes, *x, |d| {
                    for ((di, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *di += gi;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, nodes, *x, |d| {
                    for ((di, gi), m) in d.iter_mut().zip(g).zip(mask) {
                        *di += gi * m;
                    }
                });
            }
            Op::Conv1d { x, w, b } => conv1d_backward(nodes, grads, g, *x, *w, *b),
            Op::Linear { x, w, b } => {
                let xv = val(x);
                let wv = val(w);
                let (dout, din) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / din;
                if wants(x) {
                    let mut dx = vec![0.0; rows * din];
                    rows_times_w(g, rows, dout, wv.data(), din, &mut dx);
                    accumulate(grads, nodes, *x, |d| add_into(d, &dx));
                }
                if wants(w) {
                    let dw = gt_times_x(g, rows, dout, xv.data(), din);
                    accumulate(grads, nodes, *w, |d| add_into(d, &dw));
                }
                if wants(b) {
                    let db = column_sums(g, dout);
                    accumulate(grads, nodes, *b, |d| add_into(d, &db));
                }
            }
            Op::MaxPool1d { x, argmax } | Op::MaxOverSeq { x, argmax } => {
                accumulate(grads, nodes, *x, |d| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        d[src] += gi;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => layer_norm_backward(nodes, grads, g, (*x, *gamma, *beta), mean, rstd),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                accumulate(grads, nodes, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads } => attention_backward(nodes, grads, g, (*q, *k, *v), *heads),
            Op::L1Loss { pred, target } => {
                let p = val(pred).data();
                let scale = g[0] / p.len() as f64;
                accumulate(grads, nodes, *pred, |d| {
                    for ((di, pi), ti) in d.iter_mut().zip(p).zip(target) {
                        let diff = pi - ti;
                        if diff > 0.0 {
                            *di += scale;
                        } else if diff < 0.0 {
                            *di -= scale;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = val(logits).shape()[1];
                let scale = g[0] / labels.len() as f64;
                accumulate(grads, nodes, *logits, |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            d[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
            Op::WeightedSum { x, weights } => {
                accumulate(grads, nodes, *x, |d| {
                    for (di, w) in d.iter_mut().zip(weights) {
                        *di += g[0] * w;
                    }
                });
            }
        }
        Ok(())
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (a, b) in d.iter_mut().zip(g) {
        *a += b;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

/// Fills `cols` (Cin·3 × L) with the zero-padded sliding windows of one
/// sample `x` (Cin × L).
fn im2col(x: &[f64], cin: usize, len: usize, cols: &mut [f64]) {
    for c in 0..cin {
        let xr = &x[c * len..(c + 1) * len];
        for k in 0..3 {
            let row = &mut cols[(c * 3 + k) * len..(c * 3 + k + 1) * len];
            for (t, out) in row.iter_mut().enumerate() {
                let src = t as isize + k as isize - 1;
                *out = if src >= 0 && (src as usize) < len {
                    xr[src as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn conv1d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    x: Var,
    w: Var,
    b: Var,
) {
    let xv = &nodes[x.0].value;
    let wv = &nodes[w.0].value;
    let (batch, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let cout = wv.shape()[0];
    let want_x = nodes[x.0].requires_grad;
    let want_w = nodes[w.0].requires_grad;
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let gb = &g[bi * cout * len..(bi + 1) * cout * len];
            let xb = &xv.data()[bi * cin * len..(bi + 1) * cin * len];
            let mut dw = Vec::new();
            if want_w {
                let mut cols = vec![0.0; cin * 3 * len];
                im2col(xb, cin, len, &mut cols);
                dw = vec![0.0; cout * cin * 3];
                gemm(Mat::new(gb, cout, len), Mat::new(&cols, cin * 3, len).t(), &mut dw, false);
            }
            let mut dx = Vec::new();
            if want_x {
                let mut dcols = vec![0.0; cin * 3 * len];
                gemm(Mat::new(wv.data(), cout, cin * 3).t(), Mat::new(gb, cout, len), &mut dcols, false);
                dx = vec![0.0; cin * len];
                for c in 0..cin {
                    for k in 0..3 {
                        let row = &dcols[(c * 3 + k) * len..(c * 3 + k + 1) * len];
                        for (t, v) in row.iter().enumerate() {
                            let src = t as isize + k as isize - 1;
                            if src >= 0 && (src as usize) < len {
                                dx[c * len + src as usize] += v;
                            }
                        }
                    }
                }
            }
            (dx, dw)
        })
        .collect();
    let mut dws = Vec::with_capacity(batch);
    let mut dxs = Vec::with_capacity(batch);
    for (dx, dw) in per_sample {
        dxs.push(dx);
        dws.push(dw);
    }
    if want_x {
        accumulate(grads, nodes, x, |d| {
            for (bi, dx) in dxs.iter().enumerate() {
                add_into(&mut d[bi * cin * len..(bi + 1) * cin * len], dx);
            }
        });
    }
    if want_w {
        let dw = sum_in_order(dws, cout * cin * 3);
        accumulate(grads, nodes, w, |d| add_into(d, &dw));
    }
    if nodes[b.0].requires_grad {
        let mut db = vec![0.0; cout];
        for bi in 0..batch {
            for (o, dbo) in db.iter_mut().enumerate() {
                let start = (bi * cout + o) * len;
                *dbo += g[start..start + len].iter().sum::<f64>();
            }
        }
        accumulate(grads, nodes, b, |d| add_into(d, &db));
    }
}

fn layer_norm_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (x, gamma, beta): (Var, Var, Var),
    mean: &[f64],
    rstd: &[f64],
) {
    let xv = nodes[x.0].value.data();
    let gv = nodes[gamma.0].value.data();
    let dim = gv.len();
    let rows = xv.len() / dim;
    if nodes[x.0].requires_grad {
        let mut dx = vec![0.0; xv.len()];
        dx.par_chunks_mut(dim).enumerate().for_each(|(r, dxr)| {
            let xr = &xv[r * dim..(r + 1) * dim];
            let gr = &g[r * dim..(r + 1) * dim];
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..dim {
                let xhat = (xr[j] - mean[r]) * rstd[r];
                let dxhat = gr[j] * gv[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat /= dim as f64;
            mean_dxhat_xhat /= dim as f64;
            for j in 0..dim {
                let xhat = (xr[j] - mean[r]) * rstd[r];
                let dxhat = gr[j] * gv[j];
                dxr[j] = rstd[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        });
        accumulate(grads, nodes, x, |d| add_into(d, &dx));
    }
    if nodes[gamma.0].requires_grad {
        let mut dg = vec![0.0; dim];
        for r in 0..rows {
            for j in 0..dim {
                let xhat = (xv[r * dim + j] - mean[r]) * rstd[r];
                dg[j] += g[r * dim + j] * xhat;
            }
        }
        accumulate(grads, nodes, gamma, |d| add_into(d, &dg));
    }
    if nodes[beta.0].requires_grad {
        let db = column_sums(g, dim);
        accumulate(grads, nodes, beta, |d| add_into(d, &db));
    }
}

/// Key positions of one head sorted by their (key, value) slices. Every
/// reduction over keys runs in this order, which makes attention outputs
/// independent of how the sequence is permuted, bit for bit.
fn canonical_key_order(k: &[f64], v: &[f64], s: usize, d: usize, off: usize, dh: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| {
        let ka = k[a * d + off..a * d + off + dh].iter().chain(&v[a * d + off..a * d + off + dh]);
        let kb = k[b * d + off..b * d + off + dh].iter().chain(&v[b * d + off..b * d + off + dh]);
        ka.zip(kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Softmax-normalised attention weights for one (batch, head) pair, written
/// row-major into `probs` (S × S).
fn attention_probs(q: &[f64], k: &[f64], s: usize, d: usize, off: usize, dh: usize, order: &[usize], probs: &mut [f64]) {
    let scale = 1.0 / (dh as f64).sqrt();
    for i in 0..s {
        let qi = &q[i * d + off..i * d + off + dh];
        let row = &mut probs[i * s..(i + 1) * s];
        let mut max = f64::NEG_INFINITY;
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &k[j * d + off..j * d + off + dh];
            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            *r = dot * scale;
            max = max.max(*r);
        }
        for r in row.iter_mut() {
            *r = (*r - max).exp();
        }
        let total: f64 = order.iter().map(|&j| row[j]).sum();
        for r in row.iter_mut() {
            *r /= total;
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (Var, Var, Var),
    heads: usize,
) {
    let qv = &nodes[q.0].value;
    let (batch, s, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let kv = nodes[k.0].value.data();
    let vv = nodes[v.0].value.data();
    let per_batch: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let span = bi * s * d..(bi + 1) * s * d;
            let (qb, kb, vb, gb) = (&qv.data()[span.clone()], &kv[span.clone()], &vv[span.clone()], &g[span]);
            let mut dq = vec![0.0; s * d];
            let mut dk = vec![0.0; s * d];
            let mut dvv = vec![0.0; s * d];
            let mut probs = vec![0.0; s * s];
            let mut dp = vec![0.0; s * s];
            for h in 0..heads {
                let off = h * dh;
                let order = canonical_key_order(kb, vb, s, d, off, dh);
                attention_probs(qb, kb, s, d, off, dh, &order, &mut probs);
                for i in 0..s {
                    let gi = &gb[i * d + off..i * d + off + dh];
                    for j in 0..s {
                        let vj = &vb[j * d + off..j * d + off + dh];
                        dp[i * s + j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let p = probs[i * s + j];
                        for (t, gv) in gi.iter().enumerate() {
                            dvv[j * d + off + t] += p * gv;
                        }
                    }
                }
                for i in 0..s {
                    let row_p = &probs[i * s..(i + 1) * s];
                    let row_dp = &dp[i * s..(i + 1) * s];
                    let dot: f64 = row_p.iter().zip(row_dp).map(|(a, b)| a * b).sum();
                    for j in 0..s {
                        let ds = row_p[j] * (row_dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            dq[i * d + off + t] += ds * kb[j * d + off + t];
                            dk[j * d + off + t] += ds * qb[i * d + off + t];
                        }
                    }
                }
            }
            (dq, dk, dvv)
        })
        .collect();
    for (bi, (dq, dk, dvv)) in per_batch.into_iter().enumerate() {
        let span = bi * s * d..(bi + 1) * s * d;
        accumulate(grads, nodes, q, |x| add_into(&mut x[span.clone()], &dq));
        accumulate(grads, nodes, k, |x| add_into(&mut x[span.clone()], &dk));
        accumulate(grads, nodes, v, |x| add_into(&mut x[span.clone()], &dvv));
    }
}

/// Additive sinusoidal position encodings, shape (S, D): even columns
/// sin(pos / 10000^{2i/D}), odd columns the matching cosine.
pub fn sinusoidal_encoding(seq_len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[seq_len, dim], |idx| {
        let (pos, col) = (idx / dim, idx % dim);
        let pair = (col / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Graph {
    fn expect_rank(&self, op: &str, v: Var, rank: usize) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(shape_err(op, format!("expected rank {rank}, got shape {s:?}")));
        }
        Ok(s)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b))
    }

    /// Adds a constant tensor whose shape equals the trailing dimensions of
    /// `x`, broadcasting over the leading ones.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape();
        if c.shape().len() > xs.len() || xs[xs.len() - c.shape().len()..] != *c.shape() {
            return Err(shape_err(
                "add_const",
                format!("{:?} does not broadcast to {:?}", c.shape(), xs),
            ));
        }
        let n = c.numel();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + c.data()[i % n])
            .collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        self.push("add_const", value, Op::AddConst(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// (B, C, L) → (B, L, C).
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank("transpose12", x, 3)?.to_vec();
        let (b, c, l) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                for li in 0..l {
                    data[(bi * l + li) * c + ci] = xv[(bi * c + ci) * l + li];
                }
            }
        }
        self.push("transpose12", Tensor::new(vec![b, l, c], data)?, Op::Transpose12(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push("relu", value, Op::Relu(x))
    }

    /// Inverted dropout. Identity (the same node) when not training or when
    /// `p` is zero.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = rng::seeded(seed);
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x, mask })
    }

    /// Length-preserving 1-D cross-correlation: kernel 3, stride 1,
    /// zero padding 1. Shapes (B, Cin, L) × (Cout, Cin, 3) + (Cout).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.expect_rank("conv1d input", x, 3)?.to_vec();
        let ws = self.expect_rank("conv1d weight", w, 3)?.to_vec();
        let (batch, cin, len) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        if ws[1] != cin || ws[2] != 3 {
            return Err(shape_err(
                "conv1d",
                format!("weight {ws:?} incompatible with input channels {cin} and kernel 3"),
            ));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err("conv1d", format!("bias {:?} != [{cout}]", self.shape(b))));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; batch * cout * len];
        out.par_chunks_mut(cout * len).enumerate().for_each(|(bi, ob)| {
            let mut cols = vec![0.0; cin * 3 * len];
            im2col(&xv[bi * cin * len..(bi + 1) * cin * len], cin, len, &mut cols);
            gemm(Mat::new(wv, cout, cin * 3), Mat::new(&cols, cin * 3, len), ob, false);
            for (o, row) in ob.chunks_mut(len).enumerate() {
                for r in row {
                    *r += bv[o];
                }
            }
        });
        let value = Tensor::new(vec![batch, cout, len], out)?;
        self.push("conv1d", value, Op::Conv1d { x, w, b })
    }

    /// Affine map over the last axis: y = x·Wᵀ + b with W of shape
    /// (Dout, Din).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.expect_rank("linear weight", w, 2)?.to_vec();
        let (dout, din) = (ws[0], ws[1]);
        if xs.last() != Some(&din) {
            return Err(shape_err("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        if self.shape(b) != [dout] {
            return Err(shape_err("linear", format!("bias {:?} != [{dout}]", self.shape(b))));
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0; rows * dout];
        rows_times_wt(self.value(x).data(), rows, din, self.value(w).data(), dout, &mut out);
        let bv = self.value(b).data();
        for row in out.chunks_mut(dout) {
            for (r, bi) in row.iter_mut().zip(bv) {
                *r += bi;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push("linear", Tensor::new(shape, out)?, Op::Linear { x, w, b })
    }

    /// Max pooling over the last axis with kernel 2 and stride 2; the output
    /// length is ⌊L/2⌋ and ties route to the first index.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank("maxpool1d", x, 3)?.to_vec();
        let (b, c, l) = (s[0], s[1], s[2]);
        if l < 2 {
            return Err(shape_err("maxpool1d", format!("length {l} < 2")));
        }
        let half = l / 2;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(b * c * half);
        let mut argmax = Vec::with_capacity(b * c * half);
        for row in 0..b * c {
            for i in 0..half {
                let a = row * l + 2 * i;
                let idx = if xv[a] >= xv[a + 1] { a } else { a + 1 };
                data.push(xv[idx]);
                argmax.push(idx);
            }
        }
        self.push("maxpool1d", Tensor::new(vec![b, c, half], data)?, Op::MaxPool1d { x, argmax })
    }

    /// Column-wise maximum over the sequence axis: (B, S, D) → (B, D).
    pub fn max_over_seq(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank("max_over_seq", x, 3)?.to_vec();
        let (b, seq, d) = (s[0], s[1], s[2]);
        if seq == 0 {
            return Err(shape_err("max_over_seq", "empty sequence".into()));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(b * d);
        let mut argmax = Vec::with_capacity(b * d);
        for bi in 0..b {
            for j in 0..d {
                let mut best = bi * seq * d + j;
                for t in 1..seq {
                    let idx = (bi * seq + t) * d + j;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                data.push(xv[best]);
                argmax.push(best);
            }
        }
        self.push("max_over_seq", Tensor::new(vec![b, d], data)?, Op::MaxOverSeq { x, argmax })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let dim = *xs.last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} vs last dim {dim}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / dim;
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xr = &xv[r * dim..(r + 1) * dim];
            let m = xr.iter().sum::<f64>() / dim as f64;
            let var = xr.iter().map(|v| (v - m).powi(2)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..dim {
                out[r * dim + j] = (xr[j] - m) * rs * gv[j] + bv[j];
            }
            mean[r] = m;
            rstd[r] = rs;
        }
        let value = Tensor::new(xs, out)?;
        let record = self.grad_enabled();
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: if record { mean } else { Vec::new() },
                rstd: if record { rstd } else { Vec::new() },
            },
        )
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(shape_err("softmax", format!("axis {axis} for shape {xs:?}")));
        }
        let value = softmax_values(self.value(x), axis);
        self.push("softmax", value, Op::Softmax { x, axis })
    }

    /// Unmasked scaled dot-product attention on already-projected
    /// queries/keys/values, split into `heads` heads along the feature axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.expect_rank("attention", q, 3)?.to_vec();
        if self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(shape_err(
                "attention",
                format!("q {qs:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)),
            ));
        }
        let (batch, s, d) = (qs[0], qs[1], qs[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; batch * s * d];
        out.par_chunks_mut(s * d).enumerate().for_each(|(bi, ob)| {
            let span = bi * s * d..(bi + 1) * s * d;
            let (qb, kb, vb) = (&qv[span.clone()], &kv[span.clone()], &vv[span]);
            let mut probs = vec![0.0; s * s];
            for h in 0..heads {
                let off = h * dh;
                let order = canonical_key_order(kb, vb, s, d, off, dh);
                attention_probs(qb, kb, s, d, off, dh, &order, &mut probs);
                for i in 0..s {
                    let oi = &mut ob[i * d + off..i * d + off + dh];
                    for &j in &order {
                        let p = probs[i * s + j];
                        for (o, vv) in oi.iter_mut().zip(&vb[j * d + off..j * d + off + dh]) {
                            *o += p * vv;
                        }
                    }
                }
            }
        });
        let value = Tensor::new(qs, out)?;
        self.push("attention", value, Op::Attention { q, k, v, heads })
    }

    /// Full multi-head self-attention: input projections, per-head
    /// attention, output projection.
    pub fn multi_head_attention(&mut self, x: Var, p: &AttentionVars, heads: usize) -> Result<Var> {
        let q = self.linear(x, p.wq, p.bq)?;
        let k = self.linear(x, p.wk, p.bk)?;
        let v = self.linear(x, p.wv, p.bv)?;
        let a = self.attention(q, k, v, heads)?;
        self.linear(a, p.wo, p.bo)
    }

    /// Batch-mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return Err(shape_err(
                "l1_loss",
                format!("{} predictions vs {} targets", p.len(), target.len()),
            ));
        }
        let loss = p.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        self.push(
            "l1_loss",
            Tensor::scalar(loss),
            Op::L1Loss {
                pred,
                target: target.to_vec(),
            },
        )
    }

    /// Batch-mean negative log-softmax of the true class; logits (B, C).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.expect_rank("cross_entropy", logits, 2)?.to_vec();
        let (b, c) = (s[0], s[1]);
        if labels.len() != b || b == 0 {
            return Err(shape_err("cross_entropy", format!("{} labels for batch {b}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Domain(format!("label {bad} outside 0..{c}")));
        }
        let probs = softmax_values(self.value(logits), 1).into_data();
        let lv = self.value(logits).data();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                let row = &lv[r * c..(r + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[l]
            })
            .sum::<f64>()
            / b as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Σ wᵢ xᵢ with constant weights; a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != weights.len() {
            return Err(shape_err("weighted_sum", format!("{} weights for {} values", weights.len(), xv.len())));
        }
        let s = xv.iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(
            "weighted_sum",
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        )
    }
}

/// Parameter handles of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub(crate) fn softmax_values(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let xv = x.data();
    let mut out = vec![0.0; xv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| xv[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (xv[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}
