//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] evaluates each operation eagerly and, when recording, keeps
//! what the backward pass needs. Node ids are indices into the tape, so the
//! tape order is already a topological order and [`Graph::backward`] is a
//! single reverse sweep.

use crate::mask::AdditiveMask;
use crate::tensor::{Matrix, TensorError};

const LAYER_NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    SliceCols {
        src: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Softmax(NodeId),
    Mix {
        gate: NodeId,
        local: NodeId,
        global: NodeId,
    },
    Sigmoid(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SelectRows {
        src: NodeId,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<(usize, usize)>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A tape that records operations for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape for forward evaluation only; `backward` fails on it.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf holding `value` (an input or a parameter).
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1 x c` bias row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    /// `x · w + b`
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let m = self.value(src);
        if start + len > m.cols() {
            return Err(TensorError::Shape {
                op: "slice_cols",
                left: m.shape(),
                right: (start, len),
            });
        }
        let v = m.cols_slice(start, len);
        Ok(self.push(v, Op::SliceCols { src, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: m.shape(),
                });
            }
            cols += m.cols();
        }
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            for r in 0..rows {
                v.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Row-wise softmax of `logits + mask`.
    pub fn masked_softmax(&mut self, logits: NodeId, mask: &AdditiveMask) -> Result<NodeId, TensorError> {
        let v = masked_softmax_rows(self.value(logits), mask)?;
        Ok(self.push(v, Op::Softmax(logits)))
    }

    /// Row-wise mixture `g_i * local_i + (1 - g_i) * global_i` with `gate` an
    /// `L x 1` column.
    pub fn mix(&mut self, gate: NodeId, local: NodeId, global: NodeId) -> Result<NodeId, TensorError> {
        let v = mix_rows(self.value(gate).data(), self.value(local), self.value(global))?;
        Ok(self.push(v, Op::Mix { gate, local, global }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Per-row normalisation followed by `gamma * x + beta` (both `1 x c`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, TensorError> {
        let xm = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != (1, xm.cols()) || b.shape() != (1, xm.cols()) {
            return Err(TensorError::Shape {
                op: "layer_norm",
                left: xm.shape(),
                right: g.shape(),
            });
        }
        let (normed, inv_std) = normalize_rows(xm);
        let mut out = normed.clone();
        for r in 0..out.rows() {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g.data()[c] + b.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        ))
    }

    /// Rows of `table` picked by `ids` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let v = self.value(table).select_rows(ids)?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, src: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let v = self.value(src).select_rows(rows)?;
        Ok(self.push(
            v,
            Op::SelectRows {
                src,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy over `(row, class)` targets, as a `1 x 1`
    /// node. No targets gives a zero loss.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> Result<NodeId, TensorError> {
        let lm = self.value(logits);
        for &(r, c) in targets {
            if r >= lm.rows() || c >= lm.cols() {
                return Err(TensorError::Shape {
                    op: "cross_entropy",
                    left: lm.shape(),
                    right: (r, c),
                });
            }
        }
        if !lm.is_finite() {
            return Err(TensorError::NonFinite("cross_entropy logits"));
        }
        let probs = softmax_plain(lm);
        let mut loss = 0.0;
        for &(r, c) in targets {
            loss -= probs.get(r, c).max(f64::MIN_POSITIVE).ln();
        }
        if !targets.is_empty() {
            loss /= targets.len() as f64;
        }
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        if !self.record {
            return Err(TensorError::NotRecorded);
        }
        if root.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode(root.0));
        }
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, idx: usize, dy: &Matrix, grads: &mut [Option<Matrix>]) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = dy.matmul_t(self.value(*b))?;
                let db = self.value(*a).t_matmul(dy)?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = dy b, db = dyᵀ a
                let da = dy.matmul(self.value(*b))?;
                let db = dy.t_matmul(self.value(*a))?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.clone())?;
                accumulate(grads, *b, dy.clone())?;
            }
            Op::AddRow(a, bias) => {
                accumulate(grads, *a, dy.clone())?;
                accumulate(grads, *bias, dy.sum_rows())?;
            }
            Op::Scale(a, s) => accumulate(grads, *a, dy.scale(*s))?,
            Op::SliceCols { src, start } => {
                let sm = self.value(*src);
                let mut d = Matrix::zeros(sm.rows(), sm.cols());
                for r in 0..dy.rows() {
                    d.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                accumulate(grads, *src, d)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    accumulate(grads, p, dy.cols_slice(offset, cols))?;
                    offset += cols;
                }
            }
            Op::Softmax(logits) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, dyr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for (o, (yv, dv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(dyr)) {
                        *o = yv * (dv - dot);
                    }
                }
                accumulate(grads, *logits, d)?;
            }
            Op::Mix { gate, local, global } => {
                let g = self.value(*gate).data();
                let (lm, gm) = (self.value(*local), self.value(*global));
                let mut dl = Matrix::zeros(dy.rows(), dy.cols());
                let mut dgl = Matrix::zeros(dy.rows(), dy.cols());
                let mut dg = Matrix::zeros(g.len(), 1);
                for r in 0..dy.rows() {
                    let dyr = dy.row(r);
                    let mut s = 0.0;
                    for c in 0..dy.cols() {
                        dl.set(r, c, g[r] * dyr[c]);
                        dgl.set(r, c, (1.0 - g[r]) * dyr[c]);
                        s += dyr[c] * (lm.get(r, c) - gm.get(r, c));
                    }
                    dg.set(r, 0, s);
                }
                accumulate(grads, *local, dl)?;
                accumulate(grads, *global, dgl)?;
                accumulate(grads, *gate, dg)?;
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = Matrix::from_fn(y.rows(), y.cols(), |r, c| {
                    let s = y.get(r, c);
                    dy.get(r, c) * s * (1.0 - s)
                });
                accumulate(grads, *a, d)?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = Matrix::from_fn(x.rows(), x.cols(), |r, c| dy.get(r, c) * gelu_grad(x.get(r, c)));
                accumulate(grads, *a, d)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let g = self.value(*gamma).data();
                let n = normed.cols() as f64;
                let mut dx = Matrix::zeros(normed.rows(), normed.cols());
                let mut dgamma = Matrix::zeros(1, normed.cols());
                for r in 0..normed.rows() {
                    let (xh, dyr) = (normed.row(r), dy.row(r));
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..normed.cols() {
                        let dxh = dyr[c] * g[c];
                        sum_d += dxh;
                        sum_dx += dxh * xh[c];
                        dgamma.data_mut()[c] += dyr[c] * xh[c];
                    }
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        let dxh = dyr[c] * g[c];
                        *o = inv_std[r] / n * (n * dxh - sum_d - xh[c] * sum_dx);
                    }
                }
                accumulate(grads, *x, dx)?;
                accumulate(grads, *gamma, dgamma)?;
                accumulate(grads, *beta, dy.sum_rows())?;
            }
            Op::Gather { table, ids } => {
                let tm = self.value(*table);
                let mut d = Matrix::zeros(tm.rows(), tm.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in d.row_mut(id).iter_mut().zip(dy.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, d)?;
            }
            Op::SelectRows { src, rows } => {
                let sm = self.value(*src);
                let mut d = Matrix::zeros(sm.rows(), sm.cols());
                for (r, &src_row) in rows.iter().enumerate() {
                    for (o, v) in d.row_mut(src_row).iter_mut().zip(dy.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *src, d)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                if !targets.is_empty() {
                    let w = dy.get(0, 0) / targets.len() as f64;
                    for &(r, c) in targets {
                        for (k, o) in d.row_mut(r).iter_mut().enumerate() {
                            let indicator = if k == c { 1.0 } else { 0.0 };
                            *o += w * (probs.get(r, k) - indicator);
                        }
                    }
                }
                accumulate(grads, *logits, d)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, d: Matrix) -> Result<(), TensorError> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => {
            *slot = Some(d);
            Ok(())
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` when the root does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, zeros of `shape` when the root does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Matrix {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let n = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

fn softmax_plain(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax of `logits + mask` with max subtraction. An empty mask
/// (length 0) means no masking.
pub(crate) fn masked_softmax_rows(logits: &Matrix, mask: &AdditiveMask) -> Result<Matrix, TensorError> {
    if !logits.is_finite() {
        return Err(TensorError::NonFinite("attention logits"));
    }
    if mask.is_empty() {
        return Ok(softmax_plain(logits));
    }
    if logits.shape() != (mask.len(), mask.len()) {
        return Err(TensorError::Shape {
            op: "masked_softmax",
            left: logits.shape(),
            right: (mask.len(), mask.len()),
        });
    }
    let mut out = logits.clone();
    let mv = mask.values();
    for (o, m) in out.data_mut().iter_mut().zip(mv) {
        *o += m;
    }
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn mix_rows(gate: &[f64], local: &Matrix, global: &Matrix) -> Result<Matrix, TensorError> {
    if local.shape() != global.shape() || gate.len() != local.rows() {
        return Err(TensorError::Shape {
            op: "mix",
            left: local.shape(),
            right: (gate.len(), global.cols()),
        });
    }
    Ok(Matrix::from_fn(local.rows(), local.cols(), |r, c| {
        gate[r] * local.get(r, c) + (1.0 - gate[r]) * global.get(r, c)
    }))
}
