//! Recorded computation graph with reverse-mode gradients.
//!
//! A [`Graph`] lives for one forward/backward pass. Every op appends a node
//! holding its output value plus whatever the backward pass needs; nothing
//! is shared between batches. Reductions run sequentially in row-major order
//! so that identical inputs give bit-identical outputs and gradients.

use std::collections::HashMap;

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{dot, matmul, matmul_acc, matmul_at_b_acc, transpose, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Contiguous row range `[start, start + len)` treated as one sequence.
pub type Group = (usize, usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Gather { src: NodeId, idx: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(NodeId),
    Softplus(NodeId),
    Softmax(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, groups: Vec<Group>, heads: usize, probs: Vec<T> },
    GroupMean { x: NodeId, groups: Vec<Group> },
    L2Normalize { x: NodeId, norms: Vec<T> },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<T>, probs: Vec<T> },
    Mse { pred: NodeId, target: Vec<T> },
    Sum(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradients of every trainable parameter that took part, ordered by id.
    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Raw gradient of any node that required one.
    pub fn node(&self, id: NodeId) -> Option<&[T]> {
        self.by_node.get(id.0).and_then(|g| g.as_deref())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input that collects a gradient (used by gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Frozen groups enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Param, !store.is_frozen(id));
        self.params.insert(id, n);
        n
    }

    // ── forward ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("[{m}×{k}] · [{n}×{k2}]ᵀ")));
        }
        let bt = transpose(self.value(b).data(), n, k);
        let out = matmul(self.value(a).data(), &bt, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), rg))
    }

    /// Adds a length-`C` bias to every row of `x[R×C]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if self.value(b).len() != c {
            return Err(shape_err("add_bias", format!("bias of {} values for {c} columns", self.value(b).len())));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddBias(x, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", va.shape(), vb.shape())));
        }
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * s).collect()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Row lookup: output row `i` is `src[idx[i]]`.
    pub fn gather(&mut self, src: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.dims(src);
        if idx.is_empty() {
            return Err(shape_err("gather", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather", format!("row {bad} out of range for {r} rows")));
        }
        let sv = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&sv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[src]);
        let n = idx.len();
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::Gather { src, idx }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let c = self.dims(*parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?).1;
        let mut out = Vec::new();
        for &p in parts {
            let (_, pc) = self.dims(p);
            if pc != c {
                return Err(shape_err("concat_rows", format!("column count {pc} vs {c}")));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / c;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", format!("gain/bias must have {c} values")));
        }
        let eps = T::lit(eps);
        let n = T::lit(c as f64);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= n;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| gelu_fwd(e)).collect();
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| softplus(e)).collect();
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softplus(x), rg)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, out).expect("same shape"), Op::Softmax(x), rg)
    }

    /// Scaled dot-product attention over already projected `q`, `k`, `v`.
    ///
    /// Rows are split into independent sequences by `groups`; within a group
    /// every row attends to every row. Heads split the columns evenly and
    /// their outputs are written back side by side.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, groups: &[Group], heads: usize) -> Result<NodeId> {
        let (r, d) = self.dims(q);
        if self.dims(k) != (r, d) || self.dims(v) != (r, d) {
            return Err(shape_err("attention", "q, k, v must share one shape"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Config(format!("model width {d} is not divisible by {heads} heads")));
        }
        check_groups(groups, r)?;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); r * d];
        let mut probs = Vec::with_capacity(groups.iter().map(|g| g.1 * g.1 * heads).sum());
        let mut scores = Vec::new();
        for &(s, len) in groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..len {
                    let qi = &qv[(s + i) * d + c0..(s + i) * d + c0 + dh];
                    scores.clear();
                    for j in 0..len {
                        let kj = &kv[(s + j) * d + c0..(s + j) * d + c0 + dh];
                        scores.push(dot(qi, kj) * scale);
                    }
                    softmax_in_place(&mut scores);
                    let orow = &mut out[(s + i) * d + c0..(s + i) * d + c0 + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vv[(s + j) * d + c0..(s + j) * d + c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(r, d, out)?,
            Op::Attention { q, k, v, groups: groups.to_vec(), heads, probs },
            rg,
        ))
    }

    /// Attention probabilities recorded by an attention node, laid out
    /// group-major, then head, then query row.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean of each row group; output has one row per group.
    pub fn group_mean(&mut self, x: NodeId, groups: &[Group]) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        check_groups(groups, r)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); groups.len() * c];
        for (gi, &(s, len)) in groups.iter().enumerate() {
            let orow = &mut out[gi * c..(gi + 1) * c];
            for i in s..s + len {
                for (o, &v) in orow.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
            let inv = T::one() / T::lit(len as f64);
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(groups.len(), c, out)?, Op::GroupMean { x, groups: groups.to_vec() }, rg))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_exact_mut(c) {
            let mut ss = T::zero();
            for &v in row.iter() {
                ss += v * v;
            }
            let n = (ss + T::lit(1e-12)).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, out).expect("same shape"), Op::L2Normalize { x, norms }, rg)
    }

    /// Mean over rows of `-Σ_c t[r,c] · log softmax(logits[r])[c]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &Tensor<T>) -> Result<NodeId> {
        let (r, c) = self.dims(logits);
        if targets.rows() != r || targets.cols() != c {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("targets {:?} for logits [{r}×{c}]", targets.shape()),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_exact_mut(c).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter() {
                sum += (*v - max).exp();
            }
            let lse = max + sum.ln();
            let trow = targets.row(i);
            for j in 0..c {
                if trow[j] != T::zero() {
                    loss -= trow[j] * (row[j] - lse);
                }
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        loss /= T::lit(r as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, targets: targets.data().to_vec(), probs },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        let mut s = T::zero();
        for (&a, &b) in p.data().iter().zip(target.data()) {
            s += (a - b) * (a - b);
        }
        s /= T::lit(p.len() as f64);
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(s), Op::Mse { pred, target: target.data().to_vec() }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    // ── backward ─────────────────────────────────────────────────────────────

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, Tensor<T>)> = self
            .params
            .iter()
            .filter_map(|(&pid, &nid)| {
                let g = grads[nid.0].as_ref()?;
                let shape = self.nodes[nid.0].value.shape().to_vec();
                Some((pid, Tensor::new(shape, g.clone()).expect("grad shape")))
            })
            .collect();
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients { by_node: grads, params })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.requires_grad(*a) {
                    let bt = transpose(self.value(*b).data(), k, n);
                    matmul_acc(g, &bt, acc(grads, *a, m * k), m, n, k);
                }
                if self.requires_grad(*b) {
                    matmul_at_b_acc(self.value(*a).data(), g, acc(grads, *b, k * n), m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.requires_grad(*a) {
                    matmul_acc(g, self.value(*b).data(), acc(grads, *a, m * k), m, n, k);
                }
                if self.requires_grad(*b) {
                    matmul_at_b_acc(g, self.value(*a).data(), acc(grads, *b, n * k), m, n, k);
                }
            }
            Op::AddBias(x, b) => {
                let c = self.dims(*x).1;
                if self.requires_grad(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if self.requires_grad(*b) {
                    let gb = acc(grads, *b, c);
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.requires_grad(*id) {
                        add_into(acc(grads, *id, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (id, other) in [(a, b), (b, a)] {
                    if self.requires_grad(*id) {
                        let ov = self.value(*other).data();
                        let ga = acc(grads, *id, g.len());
                        for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ov) {
                            *o += gv * x;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.requires_grad(*x) {
                    let gx = acc(grads, *x, g.len());
                    for (o, &gv) in gx.iter_mut().zip(g) {
                        *o += gv * *s;
                    }
                }
            }
            Op::Gather { src, idx } => {
                if self.requires_grad(*src) {
                    let (r, c) = self.dims(*src);
                    let gs = acc(grads, *src, r * c);
                    for (row, &i) in g.chunks_exact(c).zip(idx) {
                        add_into(&mut gs[i * c..(i + 1) * c], row);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.requires_grad(*p) {
                        add_into(acc(grads, *p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (r, c) = self.dims(*x);
                let gv = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let gg = acc(grads, *gain, c);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let gb = acc(grads, *bias, c);
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
                if self.requires_grad(*x) {
                    let n = T::lit(c as f64);
                    let gx = acc(grads, *x, r * c);
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            dxhat[j] = d;
                            s1 += d;
                            s2 += d * xhat[i * c + j];
                        }
                        let k = rstd[i] / n;
                        for j in 0..c {
                            gx[i * c + j] += k * (n * dxhat[j] - s1 - xhat[i * c + j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x).data();
                    let gx = acc(grads, *x, g.len());
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv * gelu_grad(v);
                    }
                }
            }
            Op::Softplus(x) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x).data();
                    let gx = acc(grads, *x, g.len());
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv * sigmoid(v);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.requires_grad(*x) {
                    let c = self.dims(*x).1;
                    let y = node.value.data();
                    let gx = acc(grads, *x, g.len());
                    for ((grow, yrow), orow) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                        let s = dot(grow, yrow);
                        for j in 0..c {
                            orow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, groups, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, groups, *heads, probs, grads);
            }
            Op::GroupMean { x, groups } => {
                if self.requires_grad(*x) {
                    let (r, c) = self.dims(*x);
                    let gx = acc(grads, *x, r * c);
                    for (gi, &(s, len)) in groups.iter().enumerate() {
                        let inv = T::one() / T::lit(len as f64);
                        let grow = &g[gi * c..(gi + 1) * c];
                        for i in s..s + len {
                            for (o, &gv) in gx[i * c..(i + 1) * c].iter_mut().zip(grow) {
                                *o += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.requires_grad(*x) {
                    let c = self.dims(*x).1;
                    let y = node.value.data();
                    let gx = acc(grads, *x, g.len());
                    for (i, &n) in norms.iter().enumerate() {
                        let grow = &g[i * c..(i + 1) * c];
                        let yrow = &y[i * c..(i + 1) * c];
                        let s = dot(grow, yrow);
                        for j in 0..c {
                            gx[i * c + j] += (grow[j] - yrow[j] * s) / n;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                if self.requires_grad(*logits) {
                    let (r, c) = self.dims(*logits);
                    let scale = g[0] / T::lit(r as f64);
                    let gl = acc(grads, *logits, r * c);
                    for i in 0..r {
                        let trow = &targets[i * c..(i + 1) * c];
                        let mut tsum = T::zero();
                        for &t in trow {
                            tsum += t;
                        }
                        for j in 0..c {
                            gl[i * c + j] += scale * (probs[i * c + j] * tsum - trow[j]);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                if self.requires_grad(*pred) {
                    let pv = self.value(*pred).data();
                    let k = g[0] * T::lit(2.0) / T::lit(pv.len() as f64);
                    let gp = acc(grads, *pred, pv.len());
                    for ((o, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                        *o += k * (p - t);
                    }
                }
            }
            Op::Sum(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).len();
                    let gx = acc(grads, *x, n);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: &[Group],
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (r, d) = self.dims(q);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (need_q, need_k, need_v) = (self.requires_grad(q), self.requires_grad(k), self.requires_grad(v));
        let mut gq = vec![T::zero(); if need_q { r * d } else { 0 }];
        let mut gk = vec![T::zero(); if need_k { r * d } else { 0 }];
        let mut gv = vec![T::zero(); if need_v { r * d } else { 0 }];
        let mut dp = Vec::new();
        let mut off = 0;
        for &(s, len) in groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..len {
                    let p = &probs[off..off + len];
                    off += len;
                    let gi = &g[(s + i) * d + c0..(s + i) * d + c0 + dh];
                    dp.clear();
                    for j in 0..len {
                        let vj = &vv[(s + j) * d + c0..(s + j) * d + c0 + dh];
                        dp.push(dot(gi, vj));
                        if need_v {
                            let row = &mut gv[(s + j) * d + c0..(s + j) * d + c0 + dh];
                            for (o, &x) in row.iter_mut().zip(gi) {
                                *o += p[j] * x;
                            }
                        }
                    }
                    let pd = dot(p, &dp);
                    for j in 0..len {
                        let ds = p[j] * (dp[j] - pd) * scale;
                        if need_q {
                            let kj = &kv[(s + j) * d + c0..(s + j) * d + c0 + dh];
                            let row = &mut gq[(s + i) * d + c0..(s + i) * d + c0 + dh];
                            for (o, &x) in row.iter_mut().zip(kj) {
                                *o += ds * x;
                            }
                        }
                        if need_k {
                            let qi = &qv[(s + i) * d + c0..(s + i) * d + c0 + dh];
                            let row = &mut gk[(s + j) * d + c0..(s + j) * d + c0 + dh];
                            for (o, &x) in row.iter_mut().zip(qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
            }
        }
        if need_q {
            add_into(acc(grads, q, r * d), &gq);
        }
        if need_k {
            add_into(acc(grads, k, r * d), &gk);
        }
        if need_v {
            add_into(acc(grads, v, r * d), &gv);
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_groups(groups: &[Group], rows: usize) -> Result<()> {
    if groups.is_empty() {
        return Err(shape_err("groups", "no groups"));
    }
    for &(s, len) in groups {
        if len == 0 || s + len > rows {
            return Err(shape_err("groups", format!("group ({s}, {len}) invalid for {rows} rows")));
        }
    }
    Ok(())
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
