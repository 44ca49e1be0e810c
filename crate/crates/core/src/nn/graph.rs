//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] replays the tape in reverse and
//! returns a [`Gradients`] table. Nodes whose inputs never require a gradient
//! do not keep backward state, so a graph built only from constants doubles
//! as a plain inference engine.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::{gemm, MatMut, MatRef, Scalar};

const GELU_COEF: f64 = 0.044715;
const LN_EPS: f64 = 1e-5;

/// Query positions `offset, offset + stride, ..` (`count` of them) inside
/// each attention sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryRows {
    pub offset: usize,
    pub stride: usize,
    pub count: usize,
}

impl QueryRows {
    pub fn all(seq: usize) -> Self {
        QueryRows { offset: 0, stride: 1, count: seq }
    }

    pub fn position(&self, i: usize) -> usize {
        self.offset + i * self.stride
    }

    fn fits(&self, seq: usize) -> bool {
        self.count > 0 && self.stride > 0 && self.position(self.count - 1) < seq
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: S },
    Sum { x: Var },
    GatherRows { src: Var, index: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu { x: Var, tanh: Vec<S> },
    Tanh { x: Var },
    Dropout { x: Var, mask: Vec<S> },
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, queries: QueryRows, probs: Vec<S> },
    MaskedMse { pred: Var, target: Vec<S>, weight: Vec<S>, denom: S },
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let total: usize = shape.iter().product();
    if cols == 0 {
        (0, 0)
    } else {
        (total / cols, cols)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, true)
    }

    /// Constant input.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("input", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// `y = x·Wᵀ + b` with `x: [.., in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(Error::dim("linear", &xs, &ws));
        }
        let (out_dim, in_dim) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::dim("linear bias", &ws, self.shape(b)));
            }
        }
        let (n, _) = rows_cols(&xs);
        let mut y = vec![S::zero(); n * out_dim];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in y.chunks_exact_mut(out_dim) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        gemm(
            S::one(),
            MatRef::row_major(self.value(x), 0, n, in_dim, in_dim),
            MatRef::transposed(self.value(w), 0, out_dim, in_dim, in_dim),
            beta,
            MatMut::row_major(&mut y, 0, n, out_dim, out_dim),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(shape, y, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p * q).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let y = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), y, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().fold(S::zero(), |acc, &v| acc + v);
        let rg = self.rg(x);
        self.push(vec![1], vec![total], Op::Sum { x }, rg)
    }

    /// `out[i] = src[index[i]]` over rows of a matrix view of `src`.
    pub fn gather_rows(&mut self, src: Var, index: Vec<usize>) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(src));
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("gather index {bad} out of range for {rows} rows")));
        }
        let sv = self.value(src);
        let mut y = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            y.extend_from_slice(&sv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(src);
        Ok(self.push(vec![index.len(), cols], y, Op::GatherRows { src, index }, rg))
    }

    /// Stack the rows of several matrices with a common column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| rows_cols(self.shape(p)).1)
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let mut y = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            y.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, cols], y, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Reshape without copying semantics (values are cloned into a new node).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        // A scale by one keeps the backward path trivial.
        let v = self.scale(x, S::one());
        self.nodes[v.0].shape = shape;
        Ok(v)
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let eps = S::from_f64_lossy(LN_EPS);
        let inv_n = S::one() / S::from_usize_lossy(cols);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut y = vec![S::zero(); rows * cols];
        let mut xhat = if rg { vec![S::zero(); rows * cols] } else { Vec::new() };
        let mut rstd = if rg { vec![S::zero(); rows] } else { Vec::new() };
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv_n;
            let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_n;
            let rs = S::one() / (var + eps).sqrt();
            let out = &mut y[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                out[c] = h * gv[c] + bv[c];
                if rg {
                    xhat[r * cols + c] = h;
                }
            }
            if rg {
                rstd[r] = rs;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, y, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
        let k = S::from_f64_lossy(GELU_COEF);
        let half = S::from_f64_lossy(0.5);
        let rg = self.rg(x);
        let xv = self.value(x);
        let mut th: Vec<S> = xv.iter().map(|&v| c * (v + k * v * v * v)).collect();
        S::tanh_slice(&mut th);
        let y = xv.iter().zip(&th).map(|(&v, &t)| half * v * (S::one() + t)).collect();
        let th = if rg { th } else { Vec::new() };
        self.push(self.shape(x).to_vec(), y, Op::Gelu { x, tanh: th }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut y = self.value(x).to_vec();
        S::tanh_slice(&mut y);
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), y, Op::Tanh { x }, rg)
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = S::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let y = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        let mask = if rg { mask } else { Vec::new() };
        self.push(self.shape(x).to_vec(), y, Op::Dropout { x, mask }, rg)
    }

    /// Multi-head causal attention over a packed `[batch*seq, 3*d]` projection
    /// holding queries, keys and values side by side.
    ///
    /// `key_valid[b*seq + j] == false` removes key `j` of batch `b` from every
    /// softmax. A query with no admissible key produces a zero output.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        self.causal_attention_rows(qkv, batch, seq, heads, key_valid, QueryRows::all(seq))
    }

    /// [`Graph::causal_attention`] evaluated only at the query positions in
    /// `queries`; the output keeps the rank of `qkv` with `queries.count` rows
    /// per sequence.
    pub fn causal_attention_rows(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_valid: Option<&[bool]>,
        queries: QueryRows,
    ) -> Result<Var> {
        let (rows, cols3) = rows_cols(self.shape(qkv));
        if rows != batch * seq || cols3 % 3 != 0 {
            return Err(Error::dim("causal_attention", self.shape(qkv), &[batch, seq, cols3]));
        }
        if !queries.fits(seq) {
            return Err(Error::Contract(format!("query rows {queries:?} outside a sequence of {seq}")));
        }
        let d = cols3 / 3;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("embed dim {d} not divisible by {heads} heads")));
        }
        if let Some(kv) = key_valid {
            if kv.len() != batch * seq {
                return Err(Error::dim("attention key mask", &[batch, seq], &[kv.len()]));
            }
        }
        let nq = queries.count;
        let dh = d / heads;
        let scale = S::one() / S::from_usize_lossy(dh).sqrt();
        let rg = self.rg(qkv);
        let qv = self.value(qkv);
        let mut out = vec![S::zero(); batch * nq * d];
        let mut probs = vec![S::zero(); batch * heads * nq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * cols3 + h * dh;
                let p = &mut probs[(b * heads + h) * nq * seq..(b * heads + h + 1) * nq * seq];
                gemm(
                    scale,
                    MatRef::row_major(qv, base + queries.offset * cols3, nq, dh, queries.stride * cols3),
                    MatRef::transposed(qv, base + d, seq, dh, cols3),
                    S::zero(),
                    MatMut::row_major(p, 0, nq, seq, seq),
                );
                for i in 0..nq {
                    let pos = queries.position(i);
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let allowed = |j: usize| j <= pos && key_valid.map_or(true, |kv| kv[b * seq + j]);
                    let mut max = S::neg_infinity();
                    for (j, &s) in row.iter().enumerate() {
                        if allowed(j) && s > max {
                            max = s;
                        }
                    }
                    if max == S::neg_infinity() {
                        row.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let mut total = S::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        if allowed(j) {
                            *s = (*s - max).exp();
                            total += *s;
                        } else {
                            *s = S::zero();
                        }
                    }
                    let inv = S::one() / total;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                gemm(
                    S::one(),
                    MatRef::row_major(p, 0, nq, seq, seq),
                    MatRef::row_major(qv, base + 2 * d, seq, dh, cols3),
                    S::zero(),
                    MatMut::row_major(&mut out, b * nq * d + h * dh, nq, dh, d),
                );
            }
        }
        let probs = if rg { probs } else { Vec::new() };
        let op = Op::Attention { qkv, batch, seq, heads, queries, probs };
        let shape = if self.shape(qkv).len() == 2 { vec![batch * nq, d] } else { vec![batch, nq, d] };
        Ok(self.push(shape, out, op, rg))
    }

    /// Weighted mean squared error against a constant target.
    ///
    /// `weight` has one entry per row of `pred`; rows with zero weight do not
    /// contribute. The result is `Σ w_i Σ_j (p_ij - t_ij)² / (Σ w_i · cols)`,
    /// or zero when every weight is zero.
    pub fn masked_mse(&mut self, pred: Var, target: &[S], weight: &[S]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(pred));
        if target.len() != rows * cols || weight.len() != rows {
            return Err(Error::dim("masked_mse", self.shape(pred), &[target.len(), weight.len()]));
        }
        let denom = weight.iter().fold(S::zero(), |a, &w| a + w) * S::from_usize_lossy(cols);
        let pv = self.value(pred);
        let mut total = S::zero();
        for r in 0..rows {
            if weight[r] == S::zero() {
                continue;
            }
            let mut row_sum = S::zero();
            for c in 0..cols {
                let e = pv[r * cols + c] - target[r * cols + c];
                row_sum += e * e;
            }
            total += weight[r] * row_sum;
        }
        let loss = if denom > S::zero() { total / denom } else { S::zero() };
        let rg = self.rg(pred);
        let op = Op::MaskedMse {
            pred,
            target: if rg { target.to_vec() } else { Vec::new() },
            weight: weight.to_vec(),
            denom,
        };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }

    /// Reverse pass from a scalar `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let n = self.nodes.len();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads, &mut leaves);
        }
        Ok(Gradients { grads: leaves })
    }

    fn backward_node(&self, idx: usize, g: Vec<S>, grads: &mut [Option<Vec<S>>], leaves: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => leaves[idx] = Some(g),
            Op::Linear { x, w, b } => {
                let ws = &nodes[w.0].shape;
                let (out_dim, in_dim) = (ws[0], ws[1]);
                let n = g.len() / out_dim;
                if wants(*x) {
                    let dx = buf(grads, nodes, *x);
                    gemm(
                        S::one(),
                        MatRef::row_major(&g, 0, n, out_dim, out_dim),
                        MatRef::row_major(&nodes[w.0].value, 0, out_dim, in_dim, in_dim),
                        S::one(),
                        MatMut::row_major(dx, 0, n, in_dim, in_dim),
                    );
                }
                if wants(*w) {
                    let dw = buf(grads, nodes, *w);
                    gemm(
                        S::one(),
                        MatRef::transposed(&g, 0, n, out_dim, out_dim),
                        MatRef::row_major(&nodes[x.0].value, 0, n, in_dim, in_dim),
                        S::one(),
                        MatMut::row_major(dw, 0, out_dim, in_dim, in_dim),
                    );
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let db = buf(grads, nodes, *b);
                        for row in g.chunks_exact(out_dim) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(buf(grads, nodes, v), S::one(), &g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let da = buf(grads, nodes, *a);
                    for ((d, &gi), &bi) in da.iter_mut().zip(&g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let db = buf(grads, nodes, *b);
                    for ((d, &gi), &ai) in db.iter_mut().zip(&g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    axpy(buf(grads, nodes, *x), *factor, &g);
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let g0 = g[0];
                    buf(grads, nodes, *x).iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::GatherRows { src, index } => {
                if wants(*src) {
                    let cols = rows_cols(&nodes[src.0].shape).1;
                    let ds = buf(grads, nodes, *src);
                    for (r, &i) in index.iter().enumerate() {
                        axpy(&mut ds[i * cols..(i + 1) * cols], S::one(), &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(p) {
                        axpy(buf(grads, nodes, p), S::one(), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = nodes[gamma.0].value.len();
                let gv = &nodes[gamma.0].value;
                if wants(*gamma) {
                    let dg = buf(grads, nodes, *gamma);
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for ((d, &gi), &hi) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += gi * hi;
                        }
                    }
                }
                if wants(*beta) {
                    let db = buf(grads, nodes, *beta);
                    for row in g.chunks_exact(cols) {
                        axpy(db, S::one(), row);
                    }
                }
                if wants(*x) {
                    let dx = buf(grads, nodes, *x);
                    let inv_n = S::one() / S::from_usize_lossy(cols);
                    let mut dxhat = vec![S::zero(); cols];
                    let rows = g.chunks_exact(cols).zip(xhat.chunks_exact(cols)).zip(dx.chunks_exact_mut(cols));
                    for (((gr, hr), out), &rs) in rows.zip(rstd) {
                        let mut sum_d = S::zero();
                        let mut sum_dh = S::zero();
                        for (((dh, &gi), &gam), &hi) in dxhat.iter_mut().zip(gr).zip(gv).zip(hr) {
                            *dh = gi * gam;
                            sum_d += *dh;
                            sum_dh += *dh * hi;
                        }
                        for ((o, &dh), &hi) in out.iter_mut().zip(&dxhat).zip(hr) {
                            *o += rs * (dh - inv_n * (sum_d + hi * sum_dh));
                        }
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                if wants(*x) {
                    let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
                    let k3 = S::from_f64_lossy(3.0 * GELU_COEF);
                    let half = S::from_f64_lossy(0.5);
                    let xv = &nodes[x.0].value;
                    let dx = buf(grads, nodes, *x);
                    for (((d, &gi), &v), &t) in dx.iter_mut().zip(&g).zip(xv).zip(tanh) {
                        let du = c * (S::one() + k3 * v * v);
                        let dydx = half * (S::one() + t) + half * v * (S::one() - t * t) * du;
                        *d += gi * dydx;
                    }
                }
            }
            Op::Tanh { x } => {
                if wants(*x) {
                    let y = &node.value;
                    let dx = buf(grads, nodes, *x);
                    for ((d, &gi), &yi) in dx.iter_mut().zip(&g).zip(y) {
                        *d += gi * (S::one() - yi * yi);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    let dx = buf(grads, nodes, *x);
                    for ((d, &gi), &m) in dx.iter_mut().zip(&g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Attention { qkv, batch, seq, heads, queries, probs } => {
                if wants(*qkv) {
                    let dims = AttentionDims { batch: *batch, seq: *seq, heads: *heads, queries: *queries };
                    attention_backward(&nodes[qkv.0].value, probs, &g, dims, buf(grads, nodes, *qkv));
                }
            }
            Op::MaskedMse { pred, target, weight, denom } => {
                if wants(*pred) && *denom > S::zero() {
                    let pv = &nodes[pred.0].value;
                    let cols = pv.len() / weight.len().max(1);
                    let scale = g[0] * S::from_f64_lossy(2.0) / *denom;
                    let dp = buf(grads, nodes, *pred);
                    for (r, &w) in weight.iter().enumerate() {
                        if w == S::zero() {
                            continue;
                        }
                        for c in 0..cols {
                            let i = r * cols + c;
                            dp[i] += scale * w * (pv[i] - target[i]);
                        }
                    }
                }
            }
        }
    }
}

fn buf<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var) -> &'a mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()])
}

fn axpy<S: Scalar>(dst: &mut [S], alpha: S, src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

struct AttentionDims {
    batch: usize,
    seq: usize,
    heads: usize,
    queries: QueryRows,
}

fn attention_backward<S: Scalar>(qkv: &[S], probs: &[S], g: &[S], dims: AttentionDims, dqkv: &mut [S]) {
    let AttentionDims { batch, seq, heads, queries } = dims;
    let nq = queries.count;
    let qoff = queries.offset;
    let cols3 = qkv.len() / (batch * seq);
    let qstride = queries.stride * cols3;
    let d = cols3 / 3;
    let dh = d / heads;
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();
    let mut dp = vec![S::zero(); nq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * seq * cols3 + h * dh;
            let gbase = b * nq * d + h * dh;
            let p = &probs[(b * heads + h) * nq * seq..(b * heads + h + 1) * nq * seq];
            // dP = dO · Vᵀ
            gemm(
                S::one(),
                MatRef::row_major(g, gbase, nq, dh, d),
                MatRef::transposed(qkv, base + 2 * d, seq, dh, cols3),
                S::zero(),
                MatMut::row_major(&mut dp, 0, nq, seq, seq),
            );
            // dV += Pᵀ · dO
            gemm(
                S::one(),
                MatRef::transposed(p, 0, nq, seq, seq),
                MatRef::row_major(g, gbase, nq, dh, d),
                S::one(),
                MatMut::row_major(dqkv, base + 2 * d, seq, dh, cols3),
            );
            // softmax Jacobian
            for (pr, dr) in p.chunks_exact(seq).zip(dp.chunks_exact_mut(seq)) {
                let dot = pr.iter().zip(dr.iter()).fold(S::zero(), |a, (&x, &y)| a + x * y);
                for (dv, &pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - dot);
                }
            }
            // dQ += scale · dS · K
            gemm(
                scale,
                MatRef::row_major(&dp, 0, nq, seq, seq),
                MatRef::row_major(qkv, base + d, seq, dh, cols3),
                S::one(),
                MatMut::row_major(dqkv, base + qoff * cols3, nq, dh, qstride),
            );
            // dK += scale · dSᵀ · Q
            gemm(
                scale,
                MatRef::transposed(&dp, 0, nq, seq, seq),
                MatRef::row_major(qkv, base + qoff * cols3, nq, dh, qstride),
                S::one(),
                MatMut::row_major(dqkv, base + d, seq, dh, cols3),
            );
        }
    }
}

/// Gradients of leaf variables produced by [`Graph::backward`].
pub struct Gradients<S: Scalar = f32> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of a leaf of length `len`, with zeros when independent of the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<S> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![S::zero(); len])
    }
}
