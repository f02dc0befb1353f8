//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every forward operation as a node. Nodes are appended in
//! evaluation order, so walking them backwards is a valid reverse topological
//! order. Gradients accumulate additively into each input.

use std::rc::Rc;

use super::kernels::{layer_normalize_into, log_sum_exp, softmax_into};
use super::tensor::{dot, matmul_into, matmul_nt_into, matmul_tn_into};
use super::{AttentionMask, ParamId, ParamStore, Tensor};
use crate::error::{Result, UumError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    ScatterRows(Vec<(Var, Vec<usize>)>),
    SoftmaxRows { x: Var },
    LayerNormRows { x: Var, gain: Var, bias: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    PairwiseAdd { a: Var, b: Var },
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<usize>, rows: usize },
    MeanSquaredError { pred: Var, target: Vec<f64> },
    Sum(Var),
    Reshape(Var),
    SegmentAttention { q: Var, k: Var, v: Var, masks: Rc<Vec<AttentionMask>>, heads: usize, probs: Vec<f64> },
    SegmentWeightedSum { w: Var, x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::ScatterRows(_) => "scatter_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::PairwiseAdd { .. } => "pairwise_add",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MeanSquaredError { .. } => "mse",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::SegmentAttention { .. } => "segment_attention",
            Op::SegmentWeightedSum { .. } => "segment_weighted_sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    first_error: Option<UumError>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// First non-finite value recorded, if any.
    pub fn status(&self) -> Result<()> {
        match &self.first_error {
            Some(UumError::NonFinite { op, node }) => Err(UumError::NonFinite { op, node: *node }),
            Some(e) => Err(UumError::Numeric(e.to_string())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let id = self.nodes.len();
        if self.first_error.is_none() && !value.is_finite() {
            self.first_error = Some(UumError::NonFinite { op: op.name(), node: id });
        }
        self.nodes.push(Node { value, op });
        Var(id)
    }

    /// Constant input. Gradients are still computed for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.rows_cols(a);
        let (n, k2) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.rows_cols(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_values(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_values(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_values(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "elementwise op on {:?} and {:?}", ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (_, n) = self.rows_cols(x);
        assert_eq!(self.value(bias).len(), n, "bias length");
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Relu(x))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.rows_cols(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).1).collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let (pm, _) = self.rows_cols(p);
            assert_eq!(pm, m, "concat_cols row mismatch");
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + offset..i * n + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatCols(parts.to_vec()))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.rows_cols(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.rows_cols(p);
            assert_eq!(pn, n, "concat_rows column mismatch");
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.rows_cols(x);
        assert!(start + len <= n, "slice_cols out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols { x, start })
    }

    /// Gathers rows (repeats allowed). Used for embedding lookups.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (m, n) = self.rows_cols(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "select_rows index {r} out of {m}");
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        self.push(
            Tensor::from_parts(vec![rows.len(), n], out),
            Op::SelectRows { x, rows: rows.to_vec() },
        )
    }

    /// Builds a `total_rows×n` matrix whose row `idx[j]` is row `j` of the
    /// corresponding part. Unassigned rows are zero; each row is assigned at most once.
    pub fn scatter_rows(&mut self, parts: &[(Var, Vec<usize>)], total_rows: usize) -> Var {
        let n = self.rows_cols(parts[0].0).1;
        let mut out = vec![0.0; total_rows * n];
        let mut seen = vec![false; total_rows];
        for (p, idx) in parts {
            let (pm, pn) = self.rows_cols(*p);
            assert!(pm == idx.len() && pn == n, "scatter_rows part shape");
            let src = self.value(*p).data();
            for (j, &r) in idx.iter().enumerate() {
                assert!(!seen[r], "scatter_rows row {r} assigned twice");
                seen[r] = true;
                out[r * n..(r + 1) * n].copy_from_slice(&src[j * n..(j + 1) * n]);
            }
        }
        self.push(Tensor::from_parts(vec![total_rows, n], out), Op::ScatterRows(parts.to_vec()))
    }

    /// Row-wise softmax restricted to permitted entries. Pad rows become zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Rc<AttentionMask>>) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        if let Some(mask) = mask {
            assert!(mask.queries() == m && mask.keys() == n, "mask dims");
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row_mask = mask.map(|mk| mk.row(i));
            let pad = mask.is_some_and(|mk| mk.is_pad_row(i));
            if pad {
                continue;
            }
            if !softmax_into(&src[i * n..(i + 1) * n], row_mask, &mut out[i * n..(i + 1) * n]) {
                return Err(UumError::AllMasked { row: i });
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows { x }))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (m, n) = self.rows_cols(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        assert!(g.len() == n && b.len() == n, "layer norm params");
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut normalized = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let r = i * n..(i + 1) * n;
            inv_std.push(layer_normalize_into(
                &src[r.clone()],
                g,
                b,
                eps,
                &mut out[r.clone()],
                Some(&mut normalized[r]),
            ));
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNormRows { x, gain, bias, normalized, inv_std },
        )
    }

    /// `out[i*q + j] = a[i] + b[j]` for `a: p×n`, `b: q×n`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Var {
        let (p, n) = self.rows_cols(a);
        let (q, n2) = self.rows_cols(b);
        assert_eq!(n, n2, "pairwise_add widths");
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(p * q * n);
        for i in 0..p {
            let ar = &ad[i * n..(i + 1) * n];
            for j in 0..q {
                out.extend(ar.iter().zip(&bd[j * n..(j + 1) * n]).map(|(x, y)| x + y));
            }
        }
        self.push(Tensor::from_parts(vec![p * q, n], out), Op::PairwiseAdd { a, b })
    }

    /// Mean over rows of `logsumexp(z_r over permitted) − z_r[target_r]`.
    /// A row whose target is masked is an error.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.rows_cols(logits);
        assert_eq!(targets.len(), m, "one target per row");
        let z = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for i in 0..m {
            let row_mask = mask.map(|mk| &mk[i * n..(i + 1) * n]);
            let t = targets[i];
            if row_mask.is_some_and(|mk| !mk[t]) {
                return Err(UumError::Numeric(format!("cross entropy row {i}: target {t} is masked")));
            }
            let zr = &z[i * n..(i + 1) * n];
            let lse = log_sum_exp(zr, row_mask).expect("target is permitted");
            total += lse - zr[t];
            softmax_into(zr, row_mask, &mut probs[i * n..(i + 1) * n]);
        }
        let loss = total / m as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), rows: m },
        ))
    }

    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Var {
        let p = self.value(pred).data();
        assert_eq!(p.len(), target.len(), "mse length");
        let loss = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push(Tensor::scalar(loss), Op::MeanSquaredError { pred, target: target.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), t.len(), "reshape size");
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push(out, Op::Reshape(x))
    }

    /// Multi-head scaled dot-product attention applied independently to
    /// `masks.len()` consecutive segments of `m` rows each, where `q`, `k`, `v`
    /// are `(segments·m)×f`. Masked keys are skipped entirely; pad query rows
    /// produce zeros.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        masks: &Rc<Vec<AttentionMask>>,
        heads: usize,
    ) -> Result<Var> {
        let (rows, f) = self.rows_cols(q);
        assert!(self.rows_cols(k) == (rows, f) && self.rows_cols(v) == (rows, f), "q/k/v shapes");
        let segs = masks.len();
        if segs == 0 || rows % segs != 0 {
            return Err(UumError::Shape(format!("{rows} rows do not split into {segs} segments")));
        }
        let m = rows / segs;
        for mask in masks.iter() {
            if mask.queries() != m || mask.keys() != m {
                return Err(UumError::Shape(format!("mask {}x{} for segment of {m}", mask.queries(), mask.keys())));
            }
            mask.validate()?;
        }
        if heads == 0 || f % heads != 0 {
            return Err(UumError::Config(format!("latent dim {f} not divisible by {heads} heads")));
        }
        let hd = f / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * f];
        let mut probs = vec![0.0; segs * heads * m * m];
        let mut logits = vec![0.0; m];
        for (s, mask) in masks.iter().enumerate() {
            let base = s * m;
            for h in 0..heads {
                let c = h * hd;
                for i in 0..m {
                    if mask.is_pad_row(i) {
                        continue;
                    }
                    let qi = &qd[(base + i) * f + c..(base + i) * f + c + hd];
                    let allowed = mask.row(i);
                    for j in 0..m {
                        if allowed[j] {
                            logits[j] = scale * dot(qi, &kd[(base + j) * f + c..(base + j) * f + c + hd]);
                        }
                    }
                    let p = &mut probs[((s * heads + h) * m + i) * m..((s * heads + h) * m + i + 1) * m];
                    softmax_into(&logits, Some(allowed), p);
                    let o = &mut out[(base + i) * f + c..(base + i) * f + c + hd];
                    for j in 0..m {
                        if allowed[j] {
                            let vj = &vd[(base + j) * f + c..(base + j) * f + c + hd];
                            for (od, &vv) in o.iter_mut().zip(vj) {
                                *od += p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, f], out),
            Op::SegmentAttention { q, k, v, masks: Rc::clone(masks), heads, probs },
        ))
    }

    /// `out[s] = Σ_j w[s, j] · x[s·m + j]` for `w: S×m`, `x: (S·m)×f`.
    /// Entries whose weight is exactly zero are skipped.
    pub fn segment_weighted_sum(&mut self, w: Var, x: Var) -> Var {
        let (segs, m) = self.rows_cols(w);
        let (rows, f) = self.rows_cols(x);
        assert_eq!(segs * m, rows, "segment_weighted_sum shapes");
        let (wd, xd) = (self.value(w).data(), self.value(x).data());
        let mut out = vec![0.0; segs * f];
        for s in 0..segs {
            let o = &mut out[s * f..(s + 1) * f];
            for j in 0..m {
                let wj = wd[s * m + j];
                if wj != 0.0 {
                    for (od, &xv) in o.iter_mut().zip(&xd[(s * m + j) * f..(s * m + j + 1) * f]) {
                        *od += wj * xv;
                    }
                }
            }
        }
        self.push(Tensor::from_parts(vec![segs, f], out), Op::SegmentWeightedSum { w, x })
    }

    /// `x·W + b` for `x: m×k`, `W: k×n`, `b: n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    /// Backpropagates from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.status()?;
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = G B^T ; dB = A^T G
                acc(*a, &mut |ga| matmul_nt_into(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_into(av, g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).0;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // out = A B^T: dA = G B ; dB = G^T A
                acc(*a, &mut |ga| matmul_into(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_into(g, av, gb, m, n, k));
            }
            Op::Transpose(x) => {
                let (m, n) = self.rows_cols(*x);
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| add_assign(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |gx| add_assign(gx, g));
                let n = self.value(*bias).len();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_assign(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.rows_cols(p).1;
                    acc(p, &mut |gp| {
                        for i in 0..m {
                            add_assign(&mut gp[i * w..(i + 1) * w], &g[i * n + offset..i * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |gp| add_assign(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.rows_cols(*x);
                let w = node.value.cols();
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        add_assign(&mut gx[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let n = self.rows_cols(*x).1;
                acc(*x, &mut |gx| {
                    for (j, &r) in rows.iter().enumerate() {
                        add_assign(&mut gx[r * n..(r + 1) * n], &g[j * n..(j + 1) * n]);
                    }
                });
            }
            Op::ScatterRows(parts) => {
                let n = node.value.cols();
                for (p, idx) in parts {
                    acc(*p, &mut |gp| {
                        for (j, &r) in idx.iter().enumerate() {
                            add_assign(&mut gp[j * n..(j + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    });
                }
            }
            Op::SoftmaxRows { x } => {
                let n = node.value.cols();
                let p = node.value.data();
                acc(*x, &mut |gx| {
                    for (i, (pr, gr)) in p.chunks(n).zip(g.chunks(n)).enumerate() {
                        let inner = dot(pr, gr);
                        for j in 0..n {
                            gx[i * n + j] += pr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gain, bias, normalized, inv_std } => {
                let n = node.value.cols();
                let gv = self.value(*gain).data();
                acc(*gain, &mut |gg| {
                    for (xr, gr) in normalized.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(n) {
                        add_assign(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    let nf = n as f64;
                    for (i, (xr, gr)) in normalized.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / nf;
                        let mean_dx = dot(&dxhat, xr) / nf;
                        for j in 0..n {
                            gx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
            }
            Op::PairwiseAdd { a, b } => {
                let (p, n) = self.rows_cols(*a);
                let q = self.rows_cols(*b).0;
                acc(*a, &mut |ga| {
                    for i in 0..p {
                        for j in 0..q {
                            let r = (i * q + j) * n;
                            add_assign(&mut ga[i * n..(i + 1) * n], &g[r..r + n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..p {
                        for j in 0..q {
                            let r = (i * q + j) * n;
                            add_assign(&mut gb[j * n..(j + 1) * n], &g[r..r + n]);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, probs, targets, rows } => {
                let n = self.rows_cols(*logits).1;
                let scale = g[0] / *rows as f64;
                acc(*logits, &mut |gz| {
                    for i in 0..*rows {
                        for j in 0..n {
                            gz[i * n + j] += scale * probs[i * n + j];
                        }
                        gz[i * n + targets[i]] -= scale;
                    }
                });
            }
            Op::MeanSquaredError { pred, target } => {
                let pv = self.value(*pred).data();
                let c = 2.0 * g[0] / pv.len() as f64;
                acc(*pred, &mut |gp| {
                    for i in 0..gp.len() {
                        gp[i] += c * (pv[i] - target[i]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Reshape(x) => acc(*x, &mut |gx| add_assign(gx, g)),
            Op::SegmentAttention { q, k, v, masks, heads, probs } => {
                let (rows, f) = self.rows_cols(*q);
                let m = rows / masks.len();
                let hd = f / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; rows * f];
                let mut gk = vec![0.0; rows * f];
                let mut gv = vec![0.0; rows * f];
                let mut dl = vec![0.0; m];
                for (s, mask) in masks.iter().enumerate() {
                    let base = s * m;
                    for h in 0..*heads {
                        let c = h * hd;
                        for i in 0..m {
                            if mask.is_pad_row(i) {
                                continue;
                            }
                            let allowed = mask.row(i);
                            let p = &probs[((s * heads + h) * m + i) * m..((s * heads + h) * m + i + 1) * m];
                            let go = &g[(base + i) * f + c..(base + i) * f + c + hd];
                            let mut inner = 0.0;
                            for j in 0..m {
                                if allowed[j] {
                                    let r = (base + j) * f + c;
                                    let dp = dot(go, &vd[r..r + hd]);
                                    dl[j] = dp;
                                    inner += p[j] * dp;
                                    for (gvv, &gg) in gv[r..r + hd].iter_mut().zip(go) {
                                        *gvv += p[j] * gg;
                                    }
                                }
                            }
                            let qi = (base + i) * f + c;
                            for j in 0..m {
                                if allowed[j] {
                                    let d = scale * p[j] * (dl[j] - inner);
                                    if d == 0.0 {
                                        continue;
                                    }
                                    let r = (base + j) * f + c;
                                    for t in 0..hd {
                                        gq[qi + t] += d * kd[r + t];
                                        gk[r + t] += d * qd[qi + t];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |dst| add_assign(dst, &gq));
                acc(*k, &mut |dst| add_assign(dst, &gk));
                acc(*v, &mut |dst| add_assign(dst, &gv));
            }
            Op::SegmentWeightedSum { w, x } => {
                let (segs, m) = self.rows_cols(*w);
                let f = self.rows_cols(*x).1;
                let (wd, xd) = (self.value(*w).data(), self.value(*x).data());
                acc(*w, &mut |gw| {
                    for s in 0..segs {
                        for j in 0..m {
                            if wd[s * m + j] != 0.0 {
                                gw[s * m + j] += dot(&g[s * f..(s + 1) * f], &xd[(s * m + j) * f..(s * m + j + 1) * f]);
                            }
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for s in 0..segs {
                        for j in 0..m {
                            let wj = wd[s * m + j];
                            if wj != 0.0 {
                                for (gxv, &gg) in gx[(s * m + j) * f..(s * m + j + 1) * f].iter_mut().zip(&g[s * f..(s + 1) * f]) {
                                    *gxv += wj * gg;
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    /// Parameters referenced on this tape, with their nodes.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

#[inline]
fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. node `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients indexed by [`ParamId`]; `None` for unused parameters.
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
        for (id, v) in tape.params() {
            if let Some(g) = self.get(v) {
                out[id.0] = Some(Tensor::from_parts(store.get(id).shape().to_vec(), g.to_vec()));
            }
        }
        out
    }
}
