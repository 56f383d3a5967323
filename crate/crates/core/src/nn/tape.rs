//! Reverse-mode differentiation over a linear tape of dense 2-D ops.
//!
//! Every op appends a node holding its output value. [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients; parameter leaves are reported
//! by name so the optimizer can match them against a [`super::ParamStore`].

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    TargetAttention(Box<AttentionNode>),
    NllLog2(Var, Vec<usize>),
    Mse(Var, Vec<f64>),
    HalfSumSquares(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::SoftmaxRows(..) => "softmax",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::TargetAttention(..) => "target_attention",
            Op::NllLog2(..) => "nll_log2",
            Op::Mse(..) => "mse",
            Op::HalfSumSquares(..) => "half_sum_squares",
        }
    }
}

#[derive(Debug)]
struct AttentionNode {
    q: Var,
    kp: Var,
    vp: Var,
    kt: Var,
    vt: Var,
    preds: Vec<Vec<usize>>,
    heads: usize,
    /// Softmax weights, per target then per head, keys in attention order.
    weights: Vec<f64>,
    offsets: Vec<usize>,
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass.
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
    pub params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any tape variable; zeros if it did not
    /// influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        match &self.per_node[v.0] {
            Some(g) => Tensor::from_vec(&shape, g.clone()).unwrap(),
            None => Tensor::zeros(&shape),
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(name.to_string()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = dims(self.value(a));
        assert_eq!(self.value(bias).len(), n, "bias width");
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::AddBias(a, bias))
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(ta.len(), tb.len(), "elementwise shape");
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out).unwrap(), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out).unwrap(), op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    /// Row-wise softmax. Columns with `mask[j] == false` get probability 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let (m, n) = dims(self.value(a));
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            match mask {
                None => softmax_in_place(row),
                Some(mask) => {
                    let keep: Vec<usize> = (0..n).filter(|&j| mask[j]).collect();
                    let mut vals: Vec<f64> = keep.iter().map(|&j| row[j]).collect();
                    softmax_in_place(&mut vals);
                    row.iter_mut().for_each(|x| *x = 0.0);
                    for (&j, v) in keep.iter().zip(vals) {
                        row[j] = v;
                    }
                }
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = dims(self.value(a));
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::matrix(n, m, out), Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let t = self.value(p);
                assert_eq!(t.rows(), m, "concat_cols row count");
                out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = dims(self.value(a));
        assert!(start <= end && end <= n, "slice_cols bounds");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push(Tensor::matrix(m, end - start, out), Op::SliceCols(a, start))
    }

    /// Selects rows by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let n = self.value(a).cols();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for i in &idx {
            match i {
                Some(r) => out.extend_from_slice(&src[r * n..(r + 1) * n]),
                None => out.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        self.push(Tensor::matrix(idx.len(), n, out), Op::GatherRows(a, idx))
    }

    /// Multi-head scaled dot-product attention evaluated only at target rows.
    ///
    /// Target `b` queries with row `b` of `q` over the keys
    /// `kp[preds[b][0]], kp[preds[b][1]], ..., kt[b]` (values likewise), i.e.
    /// its visible predecessors followed by itself. Projections are applied by
    /// the caller; the result is the concatenation of head outputs.
    pub fn target_attention(
        &mut self,
        q: Var,
        kp: Var,
        vp: Var,
        kt: Var,
        vt: Var,
        preds: Vec<Vec<usize>>,
        heads: usize,
    ) -> Var {
        let (b, d) = dims(self.value(q));
        assert_eq!(d % heads, 0, "model width must divide into heads");
        assert_eq!(preds.len(), b, "one predecessor list per target");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kpv, vpv, ktv, vtv) = (
            self.value(q).data(),
            self.value(kp).data(),
            self.value(vp).data(),
            self.value(kt).data(),
            self.value(vt).data(),
        );
        let mut out = vec![0.0; b * d];
        let mut weights = Vec::new();
        let mut offsets = Vec::with_capacity(b + 1);
        for t in 0..b {
            offsets.push(weights.len());
            let keys = preds[t].len() + 1;
            let key_row = |m: usize| -> (&[f64], &[f64]) {
                if m < preds[t].len() {
                    let p = preds[t][m];
                    (&kpv[p * d..(p + 1) * d], &vpv[p * d..(p + 1) * d])
                } else {
                    (&ktv[t * d..(t + 1) * d], &vtv[t * d..(t + 1) * d])
                }
            };
            for h in 0..heads {
                let qh = &qv[t * d + h * dh..t * d + (h + 1) * dh];
                let mut s: Vec<f64> = (0..keys)
                    .map(|m| dot(qh, &key_row(m).0[h * dh..(h + 1) * dh]) * scale)
                    .collect();
                softmax_in_place(&mut s);
                let o = &mut out[t * d + h * dh..t * d + (h + 1) * dh];
                for (m, &w) in s.iter().enumerate() {
                    for (oj, vj) in o.iter_mut().zip(&key_row(m).1[h * dh..(h + 1) * dh]) {
                        *oj += w * vj;
                    }
                }
                weights.extend_from_slice(&s);
            }
        }
        offsets.push(weights.len());
        let node = AttentionNode {
            q,
            kp,
            vp,
            kt,
            vt,
            preds,
            heads,
            weights,
            offsets,
        };
        self.push(
            Tensor::matrix(b, d, out),
            Op::TargetAttention(Box::new(node)),
        )
    }

    /// Attention weights recorded for target `t`, head `h`.
    pub fn attention_weights(&self, v: Var, t: usize, h: usize) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::TargetAttention(a) => {
                let per_head = (a.offsets[t + 1] - a.offsets[t]) / a.heads;
                let s = a.offsets[t] + h * per_head;
                Some(&a.weights[s..s + per_head])
            }
            _ => None,
        }
    }

    /// Mean over rows of `-log2 p[row, target]`.
    pub fn nll_log2(&mut self, probs: Var, targets: Vec<usize>) -> Var {
        let (m, n) = dims(self.value(probs));
        assert_eq!(m, targets.len(), "one target per row");
        let p = self.value(probs).data();
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -p[i * n + t].log2())
            .sum();
        self.push(
            Tensor::matrix(1, 1, vec![total / m as f64]),
            Op::NllLog2(probs, targets),
        )
    }

    /// Mean over all elements of `(target - pred)^2`.
    pub fn mse(&mut self, pred: Var, target: Vec<f64>) -> Var {
        let p = self.value(pred).data();
        assert_eq!(p.len(), target.len(), "mse target length");
        let s: f64 = p.iter().zip(&target).map(|(x, y)| (y - x) * (y - x)).sum();
        let v = s / p.len() as f64;
        self.push(Tensor::matrix(1, 1, vec![v]), Op::Mse(pred, target))
    }

    pub fn half_sum_squares(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum::<f64>() * 0.5;
        self.push(Tensor::matrix(1, 1, vec![s]), Op::HalfSumSquares(a))
    }

    /// First op whose output contains NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().find(|n| !n.value.is_finite()) {
            Some(n) => Err(Error::Numerical { op: n.op.name() }),
            None => Ok(()),
        }
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        assert_eq!(self.value(loss).len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (m, k) = dims(self.value(*a));
                    let n = self.value(*b).cols();
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    matmul_nt_acc(&g, bv, acc(&mut grads, *a, m * k), m, k, n);
                    matmul_tn_acc(av, &g, acc(&mut grads, *b, k * n), m, k, n);
                }
                Op::AddBias(a, bias) => {
                    let n = out.cols();
                    let ga = acc(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    let gb = acc(&mut grads, *bias, n);
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        acc(&mut grads, v, g.len())
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += y);
                    acc(&mut grads, *b, g.len())
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x -= y);
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += s * y);
                }
                Op::AddScalar(a) => {
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += y);
                }
                Op::Relu(a) => {
                    let inp = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        if inp[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = out.data();
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let n = out.cols();
                    let y = out.data();
                    let ga = acc(&mut grads, *a, g.len());
                    for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = dims(self.value(*a));
                    let ga = acc(&mut grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let m = out.rows();
                    let n = out.cols();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = acc(&mut grads, p, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + col + j];
                            }
                        }
                        col += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = dims(self.value(*a));
                    let w = out.cols();
                    let ga = acc(&mut grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..w {
                            ga[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    let n = out.cols();
                    let len = self.value(*a).len();
                    let ga = acc(&mut grads, *a, len);
                    for (i, r) in idx.iter().enumerate() {
                        if let Some(r) = r {
                            for j in 0..n {
                                ga[r * n + j] += g[i * n + j];
                            }
                        }
                    }
                }
                Op::TargetAttention(att) => self.attention_backward(att, &g, &mut grads),
                Op::NllLog2(probs, targets) => {
                    let (m, n) = dims(self.value(*probs));
                    let p = self.value(*probs).data();
                    let gp = acc(&mut grads, *probs, m * n);
                    for (i, &t) in targets.iter().enumerate() {
                        gp[i * n + t] -= g[0] / (m as f64 * LN_2 * p[i * n + t]);
                    }
                }
                Op::Mse(pred, target) => {
                    let p = self.value(*pred).data();
                    let c = 2.0 * g[0] / p.len() as f64;
                    let gp = acc(&mut grads, *pred, p.len());
                    for i in 0..p.len() {
                        gp[i] += c * (p[i] - target[i]);
                    }
                }
                Op::HalfSumSquares(a) => {
                    let x = self.value(*a).data();
                    let ga = acc(&mut grads, *a, x.len());
                    for i in 0..x.len() {
                        ga[i] += g[0] * x[i];
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numerical { op: "backward" });
                }
                let t = Tensor::from_vec(node.value.shape(), g).unwrap();
                match params.get_mut(name) {
                    Some(prev) => prev
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(x, y)| *x += y),
                    None => {
                        params.insert(name.clone(), t);
                    }
                }
            }
        }
        Ok(Gradients {
            per_node: grads,
            params,
        })
    }

    fn attention_backward(&self, att: &AttentionNode, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (b, d) = dims(self.value(att.q));
        let dh = d / att.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(att.q).data();
        let kpv = self.value(att.kp).data();
        let vpv = self.value(att.vp).data();
        let ktv = self.value(att.kt).data();
        let vtv = self.value(att.vt).data();
        let np = self.value(att.kp).len();

        let mut gq = vec![0.0; b * d];
        let mut gkp = vec![0.0; np];
        let mut gvp = vec![0.0; np];
        let mut gkt = vec![0.0; b * d];
        let mut gvt = vec![0.0; b * d];
        for t in 0..b {
            let preds = &att.preds[t];
            let keys = preds.len() + 1;
            for h in 0..att.heads {
                let hs = h * dh..(h + 1) * dh;
                let w = &att.weights[att.offsets[t] + h * keys..att.offsets[t] + (h + 1) * keys];
                let go = &g[t * d + hs.start..t * d + hs.end];
                let qh = &qv[t * d + hs.start..t * d + hs.end];
                // d(weight_m) = go . v_m ; softmax backward to scores
                let row = |m: usize| if m < preds.len() { preds[m] * d } else { t * d };
                let dw: Vec<f64> = (0..keys)
                    .map(|m| {
                        let vs = if m < preds.len() { vpv } else { vtv };
                        dot(go, &vs[row(m) + hs.start..row(m) + hs.end])
                    })
                    .collect();
                let s = dot(w, &dw);
                for m in 0..keys {
                    let ds = w[m] * (dw[m] - s) * scale;
                    let r = row(m);
                    let (kv, gk, gv) = if m < preds.len() {
                        (kpv, &mut gkp, &mut gvp)
                    } else {
                        (ktv, &mut gkt, &mut gvt)
                    };
                    for j in 0..dh {
                        gq[t * d + hs.start + j] += ds * kv[r + hs.start + j];
                        gk[r + hs.start + j] += ds * qh[j];
                        gv[r + hs.start + j] += w[m] * go[j];
                    }
                }
            }
        }
        for (v, gv) in [
            (att.q, gq),
            (att.kp, gkp),
            (att.vp, gvp),
            (att.kt, gkt),
            (att.vt, gvt),
        ] {
            let len = gv.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            slot.iter_mut().zip(&gv).for_each(|(x, y)| *x += y);
        }
    }
}
