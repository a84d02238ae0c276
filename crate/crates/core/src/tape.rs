//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every differentiable operation appends a node holding its output value
//! and a record of its inputs. Nodes are in topological order by
//! construction, so `backward` is a single reverse sweep that visits each
//! op exactly once. Gradients accumulate additively when a value feeds
//! several consumers.
//!
//! Tensors are at most rank 2 on the tape; vectors ride as `[d]` or
//! `[1, d]`. All accumulation runs in a fixed index order, so repeated
//! runs over the same graph are bit-identical.

use crate::math;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddRowBroadcast(TensorId, TensorId),
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(TensorId),
    SliceRows {
        x: TensorId,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<TensorId>),
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<TensorId>),
    GatherRows {
        table: TensorId,
        indices: Vec<usize>,
    },
    SoftmaxRows(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    Gelu(TensorId),
    Sin(TensorId),
    Sum(TensorId),
    MeanRows(TensorId),
    /// Answer-position cross-entropy; rows with weight 0 are skipped
    /// entirely so they contribute exactly zero loss and gradient.
    MaskedCrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    tracked: bool,
    op: Op,
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    matmul_flops: u64,
    floats_live: usize,
    floats_peak: usize,
}

fn dims2(op: &'static str, shape: &[usize]) -> TensorResult<(usize, usize)> {
    match shape.len() {
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(TensorError::BadRank {
            op,
            shape: shape.to_vec(),
        }),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, tracked: bool, op: Op) -> TensorId {
        self.floats_live += data.len();
        self.floats_peak = self.floats_peak.max(self.floats_live);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad: false,
            tracked,
            op,
        });
        id
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn tracked(&self, id: TensorId) -> bool {
        self.nodes[id.0].tracked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Matmul FLOPs executed so far (2*m*k*n per product).
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    /// High-water mark of f64 values held by tape nodes and gradients.
    pub fn peak_floats(&self) -> usize {
        self.floats_peak
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    /// Copy a tape value out as a plain tensor.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        let n = self.node(id);
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    // ── Leaves ─────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let rg = t.requires_grad;
        let id = self.push(t.data.clone(), t.shape.clone(), rg, Op::Leaf);
        self.nodes[id.0].requires_grad = rg;
        id
    }

    /// Constant leaf: never differentiated.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorResult<TensorId> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    // ── Elementwise and broadcast ──────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorResult<TensorId> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let data: Vec<f64> = na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let tracked = na.tracked || nb.tracked;
        Ok(self.push(data, shape, tracked, op))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let n = self.node(a);
        let data: Vec<f64> = n.data.iter().map(|&x| x * c).collect();
        let shape = n.shape.clone();
        let tracked = n.tracked;
        self.push(data, shape, tracked, Op::Scale(a, c))
    }

    /// x[m x n] + b (numel n), b added to every row.
    pub fn add_row_broadcast(&mut self, x: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (m, n) = dims2("add_row_broadcast", &self.node(x).shape)?;
        let nb = self.node(b);
        if nb.data.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.node(x).shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let bias = nb.data.clone();
        let nx = self.node(x);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(nx.data[i * n + j] + bias[j]);
            }
        }
        let shape = nx.shape.clone();
        let tracked = nx.tracked || self.tracked(b);
        Ok(self.push(data, shape, tracked, Op::AddRowBroadcast(x, b)))
    }

    // ── Linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (m, ka) = dims2("matmul", &self.node(a).shape)?;
        let (kb, n) = dims2("matmul", &self.node(b).shape)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.node(a).shape.clone(),
                right: self.node(b).shape.clone(),
            });
        }
        let data = matmul_raw(&self.node(a).data, &self.node(b).data, m, ka, n);
        self.matmul_flops += 2 * (m as u64) * (ka as u64) * (n as u64);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(data, vec![m, n], tracked, Op::MatMul { a, b, m, k: ka, n }))
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let (m, n) = dims2("transpose", &self.node(x).shape)?;
        let data = transpose_raw(&self.node(x).data, m, n);
        let tracked = self.tracked(x);
        Ok(self.push(data, vec![n, m], tracked, Op::Transpose(x)))
    }

    // ── Row/column structure ───────────────────────────────────────────

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> TensorResult<TensorId> {
        let (m, n) = dims2("slice_rows", &self.node(x).shape)?;
        if start + len > m || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: m,
            });
        }
        let data = self.node(x).data[start * n..(start + len) * n].to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(data, vec![len, n], tracked, Op::SliceRows { x, start, len }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorResult<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("concat_rows"));
        }
        let (_, n0) = dims2("concat_rows", &self.node(parts[0]).shape)?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut tracked = false;
        for &p in parts {
            let (m, n) = dims2("concat_rows", &self.node(p).shape)?;
            if n != n0 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.node(parts[0]).shape.clone(),
                    right: self.node(p).shape.clone(),
                });
            }
            data.extend_from_slice(&self.node(p).data);
            rows += m;
            tracked |= self.tracked(p);
        }
        Ok(self.push(data, vec![rows, n0], tracked, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> TensorResult<TensorId> {
        let (m, n) = dims2("slice_cols", &self.node(x).shape)?;
        if start + len > n || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let src = &self.node(x).data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(data, vec![m, len], tracked, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorResult<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("concat_cols"));
        }
        let (m0, _) = dims2("concat_cols", &self.node(parts[0]).shape)?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut tracked = false;
        for &p in parts {
            let (m, n) = dims2("concat_cols", &self.node(p).shape)?;
            if m != m0 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.node(parts[0]).shape.clone(),
                    right: self.node(p).shape.clone(),
                });
            }
            widths.push(n);
            total += n;
            tracked |= self.tracked(p);
        }
        let mut data = Vec::with_capacity(m0 * total);
        for i in 0..m0 {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.node(p).data;
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(data, vec![m0, total], tracked, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows of `table` selected by index (embedding lookup).
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> TensorResult<TensorId> {
        let (m, n) = dims2("gather_rows", &self.node(table).shape)?;
        if indices.is_empty() {
            return Err(TensorError::EmptyInput("gather_rows"));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &ix in indices {
            if ix >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: ix,
                    bound: m,
                });
            }
            data.extend_from_slice(&self.node(table).data[ix * n..(ix + 1) * n]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            data,
            vec![indices.len(), n],
            tracked,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    // ── Nonlinearities and reductions ──────────────────────────────────

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let (m, n) = dims2("softmax_rows", &self.node(x).shape)?;
        let src = &self.node(x).data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let shape = self.node(x).shape.clone();
        let tracked = self.tracked(x);
        Ok(self.push(data, shape, tracked, Op::SoftmaxRows(x)))
    }

    /// Per-row layer normalization with population variance, then affine.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorResult<TensorId> {
        let (m, d) = dims2("layer_norm", &self.node(x).shape)?;
        if d == 1 && eps == 0.0 {
            return Err(TensorError::DegenerateVariance);
        }
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if self.node(t).data.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" {
                        "layer_norm gamma"
                    } else {
                        "layer_norm beta"
                    },
                    left: self.node(x).shape.clone(),
                    right: self.node(t).shape.clone(),
                });
            }
        }
        let src = &self.node(x).data;
        let g = &self.node(gamma).data;
        let b = &self.node(beta).data;
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let shape = self.node(x).shape.clone();
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(data, shape, tracked, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Exact Gaussian-CDF GELU, elementwise.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let n = self.node(x);
        let data: Vec<f64> = n.data.iter().map(|&v| math::gelu(v)).collect();
        let shape = n.shape.clone();
        let tracked = n.tracked;
        self.push(data, shape, tracked, Op::Gelu(x))
    }

    pub fn sin(&mut self, x: TensorId) -> TensorId {
        let n = self.node(x);
        let data: Vec<f64> = n.data.iter().map(|&v| v.sin()).collect();
        let shape = n.shape.clone();
        let tracked = n.tracked;
        self.push(data, shape, tracked, Op::Sin(x))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let n = self.node(x);
        let s = n.data.iter().sum::<f64>();
        let tracked = n.tracked;
        self.push(vec![s], vec![1], tracked, Op::Sum(x))
    }

    /// Mean over rows: [m x n] -> [1 x n].
    pub fn mean_rows(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let (m, n) = dims2("mean_rows", &self.node(x).shape)?;
        let src = &self.node(x).data;
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v /= m as f64;
        }
        let tracked = self.tracked(x);
        Ok(self.push(data, vec![1, n], tracked, Op::MeanRows(x)))
    }

    /// Weighted next-token cross entropy over rows of `logits`.
    ///
    /// Rows with weight 0 are skipped outright, so perturbing their logits
    /// changes neither the loss value nor any gradient.
    pub fn masked_cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        weights: &[f64],
    ) -> TensorResult<TensorId> {
        let (m, v) = dims2("masked_cross_entropy", &self.node(logits).shape)?;
        if targets.len() != m || weights.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "masked_cross_entropy",
                left: vec![m, v],
                right: vec![targets.len(), weights.len()],
            });
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(TensorError::EmptyInput("masked_cross_entropy: no supervised rows"));
        }
        let src = &self.node(logits).data;
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for i in 0..m {
            let w = weights[i];
            if w == 0.0 {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "masked_cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[i * v + j] /= sum;
            }
            loss += w * (sum.ln() - (row[t] - max));
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            tracked,
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    // ── Backward ───────────────────────────────────────────────────────

    fn add_to_grad(&mut self, id: TensorId, add: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.tracked {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, &ai) in g.iter_mut().zip(add) {
                    *gi += ai;
                }
            }
            None => {
                self.floats_live += add.len();
                self.floats_peak = self.floats_peak.max(self.floats_live);
                node.grad = Some(add.to_vec());
            }
        }
    }

    /// Reverse sweep from a scalar loss; fills `grad` on every tracked node
    /// reachable from it.
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        let ln = self.node(loss);
        if ln.data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: ln.shape.clone(),
            });
        }
        self.add_to_grad(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.add_to_grad(a, &grad);
                    self.add_to_grad(b, &grad);
                }
                Op::Sub(a, b) => {
                    self.add_to_grad(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|&g| -g).collect();
                    self.add_to_grad(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&g, &y)| g * y)
                        .collect();
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.add_to_grad(a, &da);
                    self.add_to_grad(b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = grad.iter().map(|&g| g * c).collect();
                    self.add_to_grad(a, &da);
                }
                Op::AddRowBroadcast(x, b) => {
                    self.add_to_grad(x, &grad);
                    let n = self.nodes[b.0].data.len();
                    let m = grad.len() / n;
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += grad[i * n + j];
                        }
                    }
                    self.add_to_grad(b, &db);
                }
                Op::MatMul { a, b, m, k, n } => {
                    // dA = dC * B^T ; dB = A^T * dC
                    let bt = transpose_raw(&self.nodes[b.0].data, k, n);
                    let da = matmul_raw(&grad, &bt, m, n, k);
                    let at = transpose_raw(&self.nodes[a.0].data, m, k);
                    let db = matmul_raw(&at, &grad, k, m, n);
                    self.add_to_grad(a, &da);
                    self.add_to_grad(b, &db);
                }
                Op::Transpose(x) => {
                    let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let dx = transpose_raw(&grad, n, m);
                    self.add_to_grad(x, &dx);
                }
                Op::SliceRows { x, start, len } => {
                    let (_, n) = dims2("slice_rows", &self.nodes[x.0].shape).unwrap();
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    dx[start * n..(start + len) * n].copy_from_slice(&grad);
                    self.add_to_grad(x, &dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].data.len();
                        let dx = grad[offset..offset + len].to_vec();
                        self.add_to_grad(p, &dx);
                        offset += len;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (m, n) = dims2("slice_cols", &self.nodes[x.0].shape).unwrap();
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        dx[r * n + start..r * n + start + len]
                            .copy_from_slice(&grad[r * len..(r + 1) * len]);
                    }
                    self.add_to_grad(x, &dx);
                }
                Op::ConcatCols(parts) => {
                    let rows = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let (_, w) = dims2("concat_cols", &self.nodes[p.0].shape).unwrap();
                        let mut dx = vec![0.0; rows * w];
                        for r in 0..rows {
                            dx[r * w..(r + 1) * w]
                                .copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                        }
                        self.add_to_grad(p, &dx);
                        offset += w;
                    }
                }
                Op::GatherRows { table, indices } => {
                    let (_, n) = dims2("gather_rows", &self.nodes[table.0].shape).unwrap();
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..n {
                            dt[ix * n + j] += grad[r * n + j];
                        }
                    }
                    self.add_to_grad(table, &dt);
                }
                Op::SoftmaxRows(x) => {
                    let (m, n) = dims2("softmax_rows", &self.nodes[i].shape).unwrap();
                    let y = &self.nodes[i].data;
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &grad[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            dx[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (m, d) = dims2("layer_norm", &self.nodes[x.0].shape).unwrap();
                    let src = &self.nodes[x.0].data;
                    let g = &self.nodes[gamma.0].data;
                    let mut dx = vec![0.0; m * d];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..m {
                        let row = &src[r * d..(r + 1) * d];
                        let gr = &grad[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // xhat_j = (x_j - mean) * inv
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gr[j] * g[j];
                            dgamma[j] += gr[j] * xhat;
                            dbeta[j] += gr[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gr[j] * g[j];
                            dx[r * d + j] = inv
                                * (dxhat
                                    - sum_dxhat / d as f64
                                    - xhat * sum_dxhat_xhat / d as f64);
                        }
                    }
                    self.add_to_grad(x, &dx);
                    self.add_to_grad(gamma, &dgamma);
                    self.add_to_grad(beta, &dbeta);
                }
                Op::Gelu(x) => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(&g, &v)| g * math::gelu_grad(v))
                        .collect();
                    self.add_to_grad(x, &dx);
                }
                Op::Sin(x) => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(&g, &v)| g * v.cos())
                        .collect();
                    self.add_to_grad(x, &dx);
                }
                Op::Sum(x) => {
                    let dx = vec![grad[0]; self.nodes[x.0].data.len()];
                    self.add_to_grad(x, &dx);
                }
                Op::MeanRows(x) => {
                    let (m, n) = dims2("mean_rows", &self.nodes[x.0].shape).unwrap();
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        for j in 0..n {
                            dx[r * n + j] = grad[j] / m as f64;
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
                Op::MaskedCrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let (m, v) = dims2("masked_cross_entropy", &self.nodes[logits.0].shape).unwrap();
                    let up = grad[0];
                    let mut dl = vec![0.0; m * v];
                    for r in 0..m {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            let mut gv = probs[r * v + j];
                            if j == targets[r] {
                                gv -= 1.0;
                            }
                            dl[r * v + j] = up * w * gv;
                        }
                    }
                    self.add_to_grad(logits, &dl);
                }
            }
        }
        Ok(())
    }
}
