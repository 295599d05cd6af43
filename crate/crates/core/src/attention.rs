//! Gated local/global self-attention layer.
//!
//! Each head computes one logits matrix `Q Kᵀ / sqrt(d)`. Two masked
//! softmaxes turn it into global scores (padding mask only) and local scores
//! (syntax or window mask). A per-token gate `g = sigmoid(h W_g + b_g)`,
//! shared by all heads, mixes the two rows before they weight the values:
//!
//! ```text
//! out_i = (g_i * S_loc_i + (1 - g_i) * S_glb_i) V
//! ```
//!
//! The rest of the layer is a post-norm transformer block: output
//! projection, residual, layer norm, GELU feed-forward, residual, layer norm.

use rand::Rng;

use crate::autograd::{self, Graph, NodeId};
use crate::mask::AdditiveMask;
use crate::rng::truncated_normal;
use crate::tensor::{Matrix, TensorError};

/// Standard deviation of the truncated-normal weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Dense map `x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Projection {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::from_fn(input, output, |_, _| truncated_normal(rng, INIT_STD)),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix, TensorError> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

/// The two parameters the gated layer adds to a standard block:
/// `W_g` (`hidden x 1`) and the scalar `b_g`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl GateParams {
    /// Zero weight and bias, so every gate starts at 0.5.
    pub fn zeros(hidden: usize) -> Self {
        Self {
            weight: Matrix::zeros(hidden, 1),
            bias: Matrix::zeros(1, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn set_bias(&mut self, b: f64) {
        self.bias.set(0, 0, b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNormParams {
    pub fn new(hidden: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, hidden, 1.0),
            beta: Matrix::zeros(1, hidden),
        }
    }
}

/// Parameters of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
    pub output: Projection,
    pub gate: GateParams,
    pub attn_norm: LayerNormParams,
    pub ff_in: Projection,
    pub ff_out: Projection,
    pub ff_norm: LayerNormParams,
}

/// Names of the tensors of one layer, in canonical order.
pub const LAYER_TENSOR_NAMES: [&str; 18] = [
    "query.weight",
    "query.bias",
    "key.weight",
    "key.bias",
    "value.weight",
    "value.bias",
    "output.weight",
    "output.bias",
    "gate.weight",
    "gate.bias",
    "attn_norm.gamma",
    "attn_norm.beta",
    "ff_in.weight",
    "ff_in.bias",
    "ff_out.weight",
    "ff_out.bias",
    "ff_norm.gamma",
    "ff_norm.beta",
];

impl LayerParams {
    /// Truncated-normal projections, zero biases (gate included), unit
    /// layer-norm scale. Feed-forward width is `4 * hidden`.
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        Self {
            query: Projection::init(hidden, hidden, rng),
            key: Projection::init(hidden, hidden, rng),
            value: Projection::init(hidden, hidden, rng),
            output: Projection::init(hidden, hidden, rng),
            gate: GateParams::zeros(hidden),
            attn_norm: LayerNormParams::new(hidden),
            ff_in: Projection::init(hidden, 4 * hidden, rng),
            ff_out: Projection::init(4 * hidden, hidden, rng),
            ff_norm: LayerNormParams::new(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.query.weight.rows()
    }

    pub fn tensors(&self) -> [&Matrix; 18] {
        [
            &self.query.weight,
            &self.query.bias,
            &self.key.weight,
            &self.key.bias,
            &self.value.weight,
            &self.value.bias,
            &self.output.weight,
            &self.output.bias,
            &self.gate.weight,
            &self.gate.bias,
            &self.attn_norm.gamma,
            &self.attn_norm.beta,
            &self.ff_in.weight,
            &self.ff_in.bias,
            &self.ff_out.weight,
            &self.ff_out.bias,
            &self.ff_norm.gamma,
            &self.ff_norm.beta,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 18] {
        [
            &mut self.query.weight,
            &mut self.query.bias,
            &mut self.key.weight,
            &mut self.key.bias,
            &mut self.value.weight,
            &mut self.value.bias,
            &mut self.output.weight,
            &mut self.output.bias,
            &mut self.gate.weight,
            &mut self.gate.bias,
            &mut self.attn_norm.gamma,
            &mut self.attn_norm.beta,
            &mut self.ff_in.weight,
            &mut self.ff_in.bias,
            &mut self.ff_out.weight,
            &mut self.ff_out.bias,
            &mut self.ff_norm.gamma,
            &mut self.ff_norm.beta,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Registers every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> LayerNodes {
        let ids = self.tensors().map(|t| g.leaf(t.clone()));
        LayerNodes { ids }
    }
}

/// Graph leaves of one layer's parameters, in [`LAYER_TENSOR_NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub ids: [NodeId; 18],
}

impl LayerNodes {
    fn q(&self) -> (NodeId, NodeId) {
        (self.ids[0], self.ids[1])
    }
    fn k(&self) -> (NodeId, NodeId) {
        (self.ids[2], self.ids[3])
    }
    fn v(&self) -> (NodeId, NodeId) {
        (self.ids[4], self.ids[5])
    }
    fn o(&self) -> (NodeId, NodeId) {
        (self.ids[6], self.ids[7])
    }
    /// `(W_g, b_g)` leaves.
    pub fn gate(&self) -> (NodeId, NodeId) {
        (self.ids[8], self.ids[9])
    }
    fn attn_norm(&self) -> (NodeId, NodeId) {
        (self.ids[10], self.ids[11])
    }
    fn ff_in(&self) -> (NodeId, NodeId) {
        (self.ids[12], self.ids[13])
    }
    fn ff_out(&self) -> (NodeId, NodeId) {
        (self.ids[14], self.ids[15])
    }
    fn ff_norm(&self) -> (NodeId, NodeId) {
        (self.ids[16], self.ids[17])
    }
}

/// Scores and gates captured from one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Per head, `L x L` global scores.
    pub global: Vec<Matrix>,
    /// Per head, `L x L` local scores.
    pub local: Vec<Matrix>,
    pub gate: Vec<f64>,
}

impl LayerTrace {
    /// Per head, the gated mixture of local and global scores.
    pub fn mixed(&self) -> Vec<Matrix> {
        self.local
            .iter()
            .zip(&self.global)
            .map(|(l, g)| autograd::mix_rows(&self.gate, l, g).expect("trace shapes agree"))
            .collect()
    }
}

/// Everything recorded during one forward pass of the encoder.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
    /// Subword token of every position.
    pub tokens: Vec<String>,
    /// True for positions holding a word's subword (not special, not pad).
    pub content: Vec<bool>,
}

impl AttentionTrace {
    pub fn seq_len(&self) -> usize {
        self.content.len()
    }
}

/// Row-wise softmax of `logits + mask` with per-row max subtraction.
pub fn masked_softmax(logits: &Matrix, mask: &AdditiveMask) -> Result<Matrix, TensorError> {
    if mask.is_empty() && !logits.is_empty() {
        return Err(TensorError::Shape {
            op: "masked_softmax",
            left: logits.shape(),
            right: (0, 0),
        });
    }
    autograd::masked_softmax_rows(logits, mask)
}

fn head_dim(hidden: usize, n_heads: usize) -> Result<usize, TensorError> {
    if n_heads == 0 || !hidden.is_multiple_of(n_heads) {
        return Err(TensorError::Shape {
            op: "heads",
            left: (hidden, n_heads),
            right: (hidden, n_heads),
        });
    }
    Ok(hidden / n_heads)
}

/// `Q_h K_hᵀ / sqrt(d)` for head `head`, where `Q = H W_q + b_q` and
/// `K = H W_k + b_k` are split into `n_heads` column blocks of width `d`.
pub fn attention_logits(
    h: &Matrix,
    query: &Projection,
    key: &Projection,
    n_heads: usize,
    head: usize,
) -> Result<Matrix, TensorError> {
    let d = head_dim(query.weight.cols(), n_heads)?;
    let q = query.apply(h)?.cols_slice(head * d, d);
    let k = key.apply(h)?.cols_slice(head * d, d);
    Ok(q.matmul_t(&k)?.scale(1.0 / (d as f64).sqrt()))
}

/// Per-token gate `sigmoid(h_i · W_g + b_g)`.
pub fn gate(h: &Matrix, params: &GateParams) -> Result<Vec<f64>, TensorError> {
    let z = h.matmul(&params.weight)?;
    let b = params.bias.get(0, 0);
    Ok(z.data().iter().map(|&v| autograd::sigmoid(v + b)).collect())
}

/// `(g_i * S_loc_i + (1 - g_i) * S_glb_i) V`, row by row.
pub fn aggregate(
    gate: &[f64],
    local: &Matrix,
    global: &Matrix,
    values: &Matrix,
) -> Result<Matrix, TensorError> {
    autograd::mix_rows(gate, local, global)?.matmul(values)
}

/// One layer on the tape. `local_mask = None` reuses the global scores as
/// local scores, which makes the layer a standard transformer block whatever
/// the gate outputs.
pub fn layer_forward(
    g: &mut Graph,
    h: NodeId,
    p: &LayerNodes,
    n_heads: usize,
    global_mask: &AdditiveMask,
    local_mask: Option<&AdditiveMask>,
    trace: Option<&mut Vec<LayerTrace>>,
) -> Result<NodeId, TensorError> {
    let hidden = g.value(h).cols();
    let d = head_dim(hidden, n_heads)?;
    let scale = 1.0 / (d as f64).sqrt();

    let q = g.affine(h, p.q().0, p.q().1)?;
    let k = g.affine(h, p.k().0, p.k().1)?;
    let v = g.affine(h, p.v().0, p.v().1)?;
    let gate_logit = g.affine(h, p.gate().0, p.gate().1)?;
    let gate = g.sigmoid(gate_logit);

    let mut record = trace.is_some().then(|| LayerTrace {
        global: Vec::with_capacity(n_heads),
        local: Vec::with_capacity(n_heads),
        gate: g.value(gate).data().to_vec(),
    });

    let mut heads = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let qh = g.slice_cols(q, head * d, d)?;
        let kh = g.slice_cols(k, head * d, d)?;
        let vh = g.slice_cols(v, head * d, d)?;
        let raw = g.matmul_t(qh, kh)?;
        let logits = g.scale(raw, scale);
        let global = g.masked_softmax(logits, global_mask)?;
        let local = match local_mask {
            Some(mask) => g.masked_softmax(logits, mask)?,
            None => global,
        };
        if let Some(rec) = record.as_mut() {
            rec.global.push(g.value(global).clone());
            rec.local.push(g.value(local).clone());
        }
        let scores = g.mix(gate, local, global)?;
        heads.push(g.matmul(scores, vh)?);
    }
    if let (Some(rec), Some(out)) = (record, trace) {
        out.push(rec);
    }

    let attended = g.concat_cols(&heads)?;
    let projected = g.affine(attended, p.o().0, p.o().1)?;
    let residual = g.add(projected, h)?;
    let normed = g.layer_norm(residual, p.attn_norm().0, p.attn_norm().1)?;

    let inner = g.affine(normed, p.ff_in().0, p.ff_in().1)?;
    let act = g.gelu(inner);
    let ff = g.affine(act, p.ff_out().0, p.ff_out().1)?;
    let residual = g.add(ff, normed)?;
    g.layer_norm(residual, p.ff_norm().0, p.ff_norm().1)
}

/// Eager single-layer forward pass (no gradients).
pub fn sla_layer_forward(
    h: &Matrix,
    params: &LayerParams,
    n_heads: usize,
    global_mask: &AdditiveMask,
    local_mask: Option<&AdditiveMask>,
    trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Matrix, TensorError> {
    if !h.is_finite() {
        return Err(TensorError::NonFinite("layer input"));
    }
    let mut g = Graph::inference();
    let x = g.leaf(h.clone());
    let nodes = params.bind(&mut g);
    let out = layer_forward(&mut g, x, &nodes, n_heads, global_mask, local_mask, trace)?;
    Ok(g.value(out).clone())
}
