use super::kernels::{gemm, MatRef};
use super::{check_dims, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    MatMul(Var, Var),
    /// `x · w + bias` with `bias` broadcast over rows.
    Linear {
        x: Var,
        w: Var,
        bias: Var,
    },
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Keeps the gate `(1 + tanh(·)) / 2` of every element for the backward pass.
    Gelu(Var, Vec<f64>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf [`Var`]s
/// that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Dynamic computation tape. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(dims: &[usize], what: &str) -> Result<(usize, usize)> {
    match dims {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape(format!("{what} expects a 2-D tensor, got {dims:?}"))),
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

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            dims,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.dims.clone(), n.value.clone()).expect("tape node dims are valid")
    }

    /// Copies a tensor onto the tape. Gradients are tracked iff the tensor
    /// requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.dims().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, dims: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(dims, data)?;
        Ok(self.push(t.dims, t.data, Op::Leaf, false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.dims(a).to_vec(), value, Op::Add(a, b), ng))
    }

    /// `x[n×m] + bias[m]` broadcast over rows. `bias` may be `[m]` or `[1, m]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = rows_cols(self.dims(x), "add_row_bias")?;
        let bl = self.value(bias).len();
        let bias_ok = matches!(self.dims(bias), [b] if *b == m) || self.dims(bias) == [1, m];
        if !bias_ok {
            return Err(Error::Shape(format!(
                "add_row_bias: bias {:?} does not broadcast over rows of [{n}, {m}]",
                self.dims(bias)
            )));
        }
        debug_assert_eq!(bl, m);
        let b = self.value(bias);
        let mut value = self.value(x).to_vec();
        for row in value.chunks_exact_mut(m) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(vec![n, m], value, Op::AddRowBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "multiply: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.dims(a).to_vec(), value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * s).collect();
        let ng = self.ng(x);
        self.push(self.dims(x).to_vec(), value, Op::Scale(x, s), ng)
    }

    /// Multiplies row `i` of a 2-D tensor by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let (n, m) = rows_cols(self.dims(x), "scale_rows")?;
        if factors.len() != n {
            return Err(Error::Shape(format!(
                "scale_rows: {} factors for {n} rows",
                factors.len()
            )));
        }
        let mut value = self.value(x).to_vec();
        for (row, f) in value.chunks_exact_mut(m).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![n, m], value, Op::ScaleRows(x, factors), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.dims(a), "matmul lhs")?;
        let (k2, n) = rows_cols(self.dims(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: lhs [{m}, {k}] and rhs [{k2}, {n}] have mismatched inner dims {k} != {k2}"
            )));
        }
        let mut value = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::row_major(self.value(a), m, k),
            MatRef::row_major(self.value(b), k, n),
            0.0,
            &mut value,
            n,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), ng))
    }

    /// Affine map `x[m×k] · w[k×n] + bias[n]`, the bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.dims(x), "linear input")?;
        let (k2, n) = rows_cols(self.dims(w), "linear weight")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "linear: input [{m}, {k}] and weight [{k2}, {n}] have mismatched inner dims {k} != {k2}"
            )));
        }
        if self.dims(bias) != [n] {
            return Err(Error::Shape(format!(
                "linear: bias {:?} does not match {n} output columns",
                self.dims(bias)
            )));
        }
        let mut value = Vec::with_capacity(m * n);
        for _ in 0..m {
            value.extend_from_slice(self.value(bias));
        }
        gemm(
            1.0,
            MatRef::row_major(self.value(x), m, k),
            MatRef::row_major(self.value(w), k, n),
            1.0,
            &mut value,
            n,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(bias);
        Ok(self.push(vec![m, n], value, Op::Linear { x, w, bias }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (n, m) = rows_cols(self.dims(x), "transpose")?;
        let src = self.value(x);
        let mut value = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                value[j * n + i] = src[i * m + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![m, n], value, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, dims: Vec<usize>) -> Result<Var> {
        check_dims(&dims)?;
        if dims.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "reshape: {:?} to {dims:?} changes the element count",
                self.dims(x)
            )));
        }
        let value = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(dims, value, Op::Reshape(x), ng))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = rows_cols(self.dims(x), "slice_rows")?;
        if len == 0 || start + len > n {
            return Err(Error::Index(format!(
                "slice_rows: rows {start}..{} out of 0..{n}",
                start + len
            )));
        }
        let value = self.value(x)[start * m..(start + len) * m].to_vec();
        let ng = self.ng(x);
        Ok(self.push(vec![len, m], value, Op::SliceRows(x, start), ng))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, m) = rows_cols(self.dims(x), "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::Shape("gather_rows: empty row list".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!("gather_rows: row {bad} out of 0..{n}")));
        }
        let src = self.value(x);
        let mut value = Vec::with_capacity(rows.len() * m);
        for &r in &rows {
            value.extend_from_slice(&src[r * m..(r + 1) * m]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows.len(), m], value, Op::GatherRows(x, rows), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows: no inputs".into()))?;
        let (_, m) = rows_cols(self.dims(first), "concat_rows")?;
        let mut n = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, c) = rows_cols(self.dims(p), "concat_rows")?;
            if c != m {
                return Err(Error::Shape(format!(
                    "concat_rows: column count {c} != {m}"
                )));
            }
            n += r;
            value.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![n, m], value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of length `m`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, m) = rows_cols(self.dims(x), "layer_norm")?;
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(p).len() != m || self.dims(p).len() > 2 {
                return Err(Error::Shape(format!(
                    "layer_norm: {name} {:?} does not match width {m}",
                    self.dims(p)
                )));
            }
        }
        let src = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut value = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..m {
                let h = (row[j] - mean) * rs;
                xhat[i * m + j] = h;
                value[i * m + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            vec![n, m],
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let gate: Vec<f64> = xv.iter().map(|&v| gelu_gate(v)).collect();
        let value = xv.iter().zip(&gate).map(|(&v, &s)| v * s).collect();
        let ng = self.ng(x);
        self.push(self.dims(x).to_vec(), value, Op::Gelu(x, gate), ng)
    }

    /// Rows of `table[K×d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (k, d) = rows_cols(self.dims(table), "embedding")?;
        if ids.is_empty() {
            return Err(Error::Shape("embedding: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(Error::Index(format!(
                "embedding: id {bad} out of range for table of {k} rows"
            )));
        }
        let src = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = rows_cols(self.dims(x), "softmax_rows")?;
        let mut value = self.value(x).to_vec();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax_rows: non-finite input".into()));
        }
        for row in value.chunks_exact_mut(m) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![n, m], value, Op::SoftmaxRows(x), ng))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = rows_cols(self.dims(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!(
                "cross_entropy: target {bad} out of range for {v} classes"
            )));
        }
        let mut probs = self.value(logits).to_vec();
        if probs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("cross_entropy: non-finite logits".into()));
        }
        let mut total = 0.0;
        for (i, row) in probs.chunks_exact_mut(v).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![total / n as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    /// Multi-head causal self-attention over `batch` stacked sequences.
    ///
    /// `q`, `k`, `v` are `[batch·seq, d]`; head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads`. Position `i` attends to `0..=i` of its own
    /// sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = rows_cols(self.dims(q), "causal_attention")?;
        if self.dims(k) != [rows, d] || self.dims(v) != [rows, d] {
            return Err(Error::Shape(format!(
                "causal_attention: q {:?}, k {:?}, v {:?} differ",
                self.dims(q),
                self.dims(k),
                self.dims(v)
            )));
        }
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Shape(format!(
                "causal_attention: {rows} rows do not split into {batch} sequences"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "causal_attention: width {d} not divisible by {heads} heads"
            )));
        }
        let seq = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                let (qh, kh, vh) = (
                    head_view(qv, off, seq, dh, d),
                    head_view(kv, off, seq, dh, d),
                    head_view(vv, off, seq, dh, d),
                );
                // Row block `r0..r1` only sees keys `0..r1`.
                for (r0, r1) in causal_blocks(seq) {
                    let kt = kh.block(0, 0, r1, dh).t();
                    gemm(scale, qh.block(r0, 0, r1 - r0, dh), kt, 0.0, &mut p[r0 * seq..], seq);
                    for i in r0..r1 {
                        softmax_in_place(&mut p[i * seq..=i * seq + i]);
                        p[i * seq + i + 1..(i + 1) * seq].fill(0.0);
                    }
                    let pb = MatRef::row_major(p, seq, seq).block(r0, 0, r1 - r0, r1);
                    gemm(1.0, pb, vh.block(0, 0, r1, dh), 0.0, &mut out[off + r0 * d..], d);
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns gradients for every
    /// leaf that required them and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("backward: loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got dims {:?}",
                self.nodes[loss.0].dims
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                *g = None;
            } else if g.is_none() {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Accumulates into the gradient buffer of `v` when it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |buf| add_into(buf, g));
                }
            }
            Op::AddRowBias(x, bias) => {
                acc(*x, &mut |buf| add_into(buf, g));
                let m = node.dims[1];
                acc(*bias, &mut |buf| {
                    for row in g.chunks_exact(m) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, gi), x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi * s;
                }
            }),
            Op::ScaleRows(x, factors) => {
                let m = node.dims[1];
                acc(*x, &mut |buf| {
                    for ((orow, grow), f) in buf.chunks_exact_mut(m).zip(g.chunks_exact(m)).zip(factors) {
                        for (o, gi) in orow.iter_mut().zip(grow) {
                            *o += gi * f;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].dims[0], nodes[a.0].dims[1]);
                let n = node.dims[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = dC · Bᵀ
                acc(*a, &mut |buf| {
                    gemm(
                        1.0,
                        MatRef::row_major(g, m, n),
                        MatRef::transposed(bv, k, n),
                        1.0,
                        buf,
                        k,
                    )
                });
                // dB = Aᵀ · dC
                acc(*b, &mut |buf| {
                    gemm(
                        1.0,
                        MatRef::transposed(av, m, k),
                        MatRef::row_major(g, m, n),
                        1.0,
                        buf,
                        n,
                    )
                });
            }
            Op::Linear { x, w, bias } => {
                let (m, k) = (nodes[x.0].dims[0], nodes[x.0].dims[1]);
                let n = node.dims[1];
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                acc(*x, &mut |buf| {
                    gemm(
                        1.0,
                        MatRef::row_major(g, m, n),
                        MatRef::transposed(wv, k, n),
                        1.0,
                        buf,
                        k,
                    )
                });
                acc(*w, &mut |buf| {
                    gemm(
                        1.0,
                        MatRef::transposed(xv, m, k),
                        MatRef::row_major(g, m, n),
                        1.0,
                        buf,
                        n,
                    )
                });
                acc(*bias, &mut |buf| {
                    for row in g.chunks_exact(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Transpose(x) => {
                let (n, m) = (nodes[x.0].dims[0], nodes[x.0].dims[1]);
                acc(*x, &mut |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[i * m + j] += g[j * n + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::SliceRows(x, start) => {
                let m = node.dims[1];
                acc(*x, &mut |buf| add_into(&mut buf[start * m..start * m + g.len()], g));
            }
            Op::GatherRows(x, rows) => {
                let m = node.dims[1];
                acc(*x, &mut |buf| {
                    for (grow, &r) in g.chunks_exact(m).zip(rows) {
                        add_into(&mut buf[r * m..(r + 1) * m], grow);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |buf| add_into(buf, &g[off..off + len]));
                    off += len;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let m = node.dims[1];
                let gv = &nodes[gamma.0].value;
                acc(*x, &mut |buf| {
                    for (i, grow) in g.chunks_exact(m).enumerate() {
                        let xh = &xhat[i * m..(i + 1) * m];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..m {
                            let dxh = grow[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= m as f64;
                        mean_dxh_xh /= m as f64;
                        let out = &mut buf[i * m..(i + 1) * m];
                        for j in 0..m {
                            let dxh = grow[j] * gv[j];
                            out[j] += rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
                acc(*gamma, &mut |buf| {
                    for (grow, xrow) in g.chunks_exact(m).zip(xhat.chunks_exact(m)) {
                        for j in 0..m {
                            buf[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for grow in g.chunks_exact(m) {
                        add_into(buf, grow);
                    }
                });
            }
            Op::Gelu(x, gate) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |buf| {
                    for (((o, gi), &v), &s) in buf.iter_mut().zip(g).zip(xv).zip(gate) {
                        *o += gi * gelu_grad(v, s);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.dims[1];
                acc(*table, &mut |buf| {
                    for (grow, &id) in g.chunks_exact(d).zip(ids) {
                        add_into(&mut buf[id * d..(id + 1) * d], grow);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let m = node.dims[1];
                let y = &node.value;
                acc(*x, &mut |buf| {
                    for ((orow, grow), yrow) in buf
                        .chunks_exact_mut(m)
                        .zip(g.chunks_exact(m))
                        .zip(y.chunks_exact(m))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            orow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].dims[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |buf| {
                    for (i, (orow, prow)) in buf.chunks_exact_mut(v).zip(probs.chunks_exact(v)).enumerate() {
                        for j in 0..v {
                            orow[j] += scale * prow[j];
                        }
                        orow[targets[i]] -= scale;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let d = node.dims[1];
                let seq = node.dims[0] / batch;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; seq * seq];
                for b in 0..*batch {
                    for h in 0..*heads {
                        let off = b * seq * d + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let pm = MatRef::row_major(p, seq, seq);
                        let go = head_view(g, off, seq, dh, d);
                        let (qh, kh, vh) = (
                            head_view(qv, off, seq, dh, d),
                            head_view(kv, off, seq, dh, d),
                            head_view(vv, off, seq, dh, d),
                        );
                        for (r0, r1) in causal_blocks(seq) {
                            let n = r1 - r0;
                            let gob = go.block(r0, 0, n, dh);
                            // dV = Pᵀ · dO
                            gemm(1.0, pm.block(r0, 0, n, r1).t(), gob, 1.0, &mut dv[off..], d);
                            // dP = dO · Vᵀ
                            gemm(1.0, gob, vh.block(0, 0, r1, dh).t(), 0.0, &mut dp[r0 * seq..], seq);
                            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
                            for i in r0..r1 {
                                let prow = &p[i * seq..=i * seq + i];
                                let drow = &mut dp[i * seq..i * seq + r1];
                                let (seen, future) = drow.split_at_mut(i + 1);
                                let dot: f64 = seen.iter().zip(prow).map(|(a, b)| a * b).sum();
                                for (x, &pv) in seen.iter_mut().zip(prow) {
                                    *x = pv * (*x - dot) * scale;
                                }
                                future.fill(0.0);
                            }
                            let ds = MatRef::row_major(&dp, seq, seq).block(r0, 0, n, r1);
                            // dQ = dS · K, dK = dSᵀ · Q
                            gemm(1.0, ds, kh.block(0, 0, r1, dh), 1.0, &mut dq[off + r0 * d..], d);
                            gemm(1.0, ds.t(), qh.block(r0, 0, n, dh), 1.0, &mut dk[off..], d);
                        }
                    }
                }
                acc(*q, &mut |buf| add_into(buf, &dq));
                acc(*k, &mut |buf| add_into(buf, &dk));
                acc(*v, &mut |buf| add_into(buf, &dv));
            }
        }
    }
}

fn head_view(data: &[f64], off: usize, seq: usize, dh: usize, d: usize) -> MatRef<'_> {
    MatRef {
        data: &data[off..],
        rows: seq,
        cols: dh,
        rs: d,
        cs: 1,
    }
}

/// Rows per block of the causal attention products.
const CAUSAL_BLOCK: usize = 64;

/// `(start, end)` row blocks covering `0..seq`.
fn causal_blocks(seq: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..seq)
        .step_by(CAUSAL_BLOCK)
        .map(move |r0| (r0, (r0 + CAUSAL_BLOCK).min(seq)))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `(1 + tanh(u)) / 2` for the tanh-approximation argument `u`, written as
/// the logistic function of `2u` so it costs one `exp`.
fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

/// Derivative of [`gelu`] at `x`, given `s = gelu_gate(x)`.
fn gelu_grad(x: f64, s: f64) -> f64 {
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    let m = x.len();
    let mean = x.iter().sum::<f64>() / m as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..m {
        out[j] = (x[j] - mean) * rs * gamma[j] + beta[j];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(dims, data).unwrap().with_requires_grad(true)
    }

    #[test]
    fn gelu_matches_tanh_formula() {
        let sqrt_2_over_pi = (2.0 / std::f64::consts::PI).sqrt();
        for i in -4000..=4000 {
            let x = i as f64 / 200.0;
            let reference = 0.5 * x * (1.0 + (sqrt_2_over_pi * (x + 0.044715 * x.powi(3))).tanh());
            assert!((gelu(x) - reference).abs() <= 1e-14 * x.abs().max(1.0), "x = {x}");
        }
        assert_eq!(gelu(1e4), 1e4);
        assert_eq!(gelu(-1e4), 0.0);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 2], vec![1., 2., 3., 4.]));
        let id = tape.constant(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let z = tape.constant(vec![2, 2], vec![0.; 4]).unwrap();
        let c = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(c), &[1., 2., 3., 4.]);
        let c = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(c), &[0.; 4]);
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_rows_basic() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![0., 0., 1000., 0.]).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 1.0).abs() < 1e-12 && (0.0..1e-12).contains(&v[3]));
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![f64::NAN, 0.]).unwrap();
        assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3, 64], vec![0.; 192]).unwrap();
        let l = tape.cross_entropy(x, &[0, 17, 63]).unwrap();
        assert!((tape.value(l)[0] - 64f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.; 8];
        logits[5] = 1000.0;
        let x = tape.constant(vec![1, 8], logits).unwrap();
        let l = tape.cross_entropy(x, &[5]).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 4], vec![0.; 4]).unwrap();
        assert!(matches!(tape.cross_entropy(x, &[4]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let xt = t(vec![2, 3], vec![1., -2., 3., 0.5, 0., -1.]);
        let x = tape.leaf(&xt);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
        assert!(tape.is_empty());

        let x = tape.leaf(&xt);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let want: Vec<f64> = xt.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap(), want.as_slice());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 2], vec![1., 2.]));
        let c = tape.constant(vec![1, 2], vec![3., 4.]).unwrap();
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[3., 4.]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1., 2.]));
        let unused = tape.leaf(&t(vec![3], vec![1., 2., 3.]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn embedding_rejects_bad_id() {
        let mut tape = Tape::new();
        let tab = tape.constant(vec![4, 2], vec![0.; 8]).unwrap();
        assert!(matches!(tape.embedding(tab, &[1, 4]), Err(Error::Index(_))));
    }
}
