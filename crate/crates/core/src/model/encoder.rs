use rand::Rng;

use super::{AttentionMode, Label, LabeledExample, ModelError, SlaConfig, Task};
use crate::attention::{
    layer_forward, AttentionTrace, LayerNodes, LayerParams, Projection, INIT_STD,
    LAYER_TENSOR_NAMES,
};
use crate::autograd::{Graph, NodeId};
use crate::mask::{build_syntax_mask, build_window_mask, neighbor_min_distance, AdditiveMask};
use crate::rng::{stream, truncated_normal, Stream};
use crate::subword::{build_alignment, AlignOptions, SubwordAlignment, Vocabulary};
use crate::syntax::{all_pairs_distance, DependencySentence};
use crate::tensor::Matrix;

/// A model input with its masks, ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub alignment: SubwordAlignment,
    /// Sentences as kept after truncation.
    pub sentences: Vec<DependencySentence>,
    pub global_mask: AdditiveMask,
    /// `None` in global-only mode.
    pub local_mask: Option<AdditiveMask>,
    /// Hidden-state rows fed to the classifier head.
    pub readout: Vec<usize>,
    /// Gold class per readout row; empty for unlabeled input.
    pub targets: Vec<usize>,
}

impl EncodedInput {
    pub fn seq_len(&self) -> usize {
        self.alignment.seq_len()
    }
}

pub struct ForwardOutput {
    /// Final hidden states, `L x hidden`.
    pub hidden: Matrix,
    /// Head logits for the readout rows.
    pub logits: Matrix,
    pub trace: Option<AttentionTrace>,
}

impl ForwardOutput {
    /// Mean cross-entropy of `targets` against the logits, one per row.
    pub fn cross_entropy(&self, targets: &[usize]) -> f64 {
        assert_eq!(targets.len(), self.logits.rows(), "one target per readout row");
        if targets.is_empty() {
            return 0.0;
        }
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = self.logits.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum();
        total / targets.len() as f64
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.logits.rows())
            .map(|r| {
                let row = self.logits.row(r);
                (0..row.len())
                    .fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect()
    }
}

/// Leaves of every model tensor on one tape.
pub struct ModelNodes {
    pub token: NodeId,
    pub position: NodeId,
    pub segment: NodeId,
    pub layers: Vec<LayerNodes>,
    pub head_weight: NodeId,
    pub head_bias: NodeId,
}

impl ModelNodes {
    /// Same order as [`SlaModel::tensors`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.token, self.position, self.segment];
        for l in &self.layers {
            ids.extend_from_slice(&l.ids);
        }
        ids.push(self.head_weight);
        ids.push(self.head_bias);
        ids
    }
}

/// Embeddings, a stack of gated attention layers and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct SlaModel {
    pub config: SlaConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub segment_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub head: Projection,
}

impl SlaModel {
    /// Fresh parameters drawn from the config's seed.
    pub fn new(config: SlaConfig, vocab_size: usize) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = stream(config.seed, Stream::Init);
        let h = config.hidden;
        let table = |rows: usize, rng: &mut dyn rand::RngCore| {
            Matrix::from_fn(rows, h, |_, _| truncated_normal(rng, INIT_STD))
        };
        let token_embedding = table(vocab_size, &mut rng);
        let position_embedding = table(config.max_len, &mut rng);
        let segment_embedding = table(2, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams::init(h, &mut rng))
            .collect();
        let head = Projection::init(h, config.num_labels, &mut rng);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            segment_embedding,
            layers,
            head,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.rows()
    }

    /// Canonical tensor listing; checkpoints and optimizers use this order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["embeddings.token", "embeddings.position", "embeddings.segment"]
            .map(String::from)
            .to_vec();
        for i in 0..self.layers.len() {
            names.extend(LAYER_TENSOR_NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.segment_embedding,
        ];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.segment_embedding,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Sets every layer's gate bias.
    pub fn set_gate_bias(&mut self, b: f64) {
        for l in &mut self.layers {
            l.gate.set_bias(b);
        }
    }

    pub fn bind(&self, g: &mut Graph) -> ModelNodes {
        ModelNodes {
            token: g.leaf(self.token_embedding.clone()),
            position: g.leaf(self.position_embedding.clone()),
            segment: g.leaf(self.segment_embedding.clone()),
            layers: self.layers.iter().map(|l| l.bind(g)).collect(),
            head_weight: g.leaf(self.head.weight.clone()),
            head_bias: g.leaf(self.head.bias.clone()),
        }
    }

    /// Tokenizes, truncates and builds both masks for unlabeled sentences.
    pub fn prepare(
        &self,
        sentences: &[DependencySentence],
        vocab: &Vocabulary,
    ) -> Result<EncodedInput, ModelError> {
        let cfg = &self.config;
        if vocab.len() != self.vocab_size() {
            return Err(ModelError::Config(format!(
                "vocabulary has {} entries but the model embeds {}",
                vocab.len(),
                self.vocab_size()
            )));
        }
        let refs: Vec<&DependencySentence> = sentences.iter().collect();
        let alignment = build_alignment(
            &refs,
            vocab,
            AlignOptions {
                max_len: cfg.max_len,
                lowercase: cfg.lowercase,
            },
        )?;
        let kept: Vec<DependencySentence> = sentences
            .iter()
            .enumerate()
            .map(|(i, s)| s.prefix(alignment.word_count(i)))
            .collect();
        let local_mask = match cfg.mode {
            AttentionMode::Sla => {
                let ds: Vec<_> = kept
                    .iter()
                    .map(|s| {
                        let d = neighbor_min_distance(&all_pairs_distance(s));
                        if cfg.transpose_d {
                            d.transposed()
                        } else {
                            d
                        }
                    })
                    .collect();
                Some(build_syntax_mask(&ds, cfg.m, &alignment)?)
            }
            AttentionMode::Window => Some(build_window_mask(&alignment, cfg.k)),
            AttentionMode::GlobalOnly => None,
        };
        let readout = match cfg.task {
            Task::TokenLabeling => alignment.first_subwords(0),
            Task::SequenceClassification => vec![SubwordAlignment::CLS_POS],
        };
        Ok(EncodedInput {
            global_mask: AdditiveMask::padding_only(&alignment),
            alignment,
            sentences: kept,
            local_mask,
            readout,
            targets: Vec::new(),
        })
    }

    /// [`prepare`](Self::prepare) plus gold targets; token labels of
    /// truncated words are dropped with them.
    pub fn prepare_example(
        &self,
        ex: &LabeledExample,
        vocab: &Vocabulary,
        index: usize,
    ) -> Result<EncodedInput, ModelError> {
        ex.validate(index, self.config.task)?;
        let mut input = self.prepare(&ex.sentences, vocab)?;
        input.targets = match &ex.label {
            Label::Class(c) => vec![*c],
            Label::Tokens(ts) => ts[..input.readout.len()].to_vec(),
        };
        if let Some(&bad) = input.targets.iter().find(|&&c| c >= self.config.num_labels) {
            return Err(ModelError::Example {
                index,
                reason: format!("label {bad} outside 0..{}", self.config.num_labels),
            });
        }
        Ok(input)
    }

    /// Token + position + segment embeddings.
    pub fn embed_on(&self, g: &mut Graph, nodes: &ModelNodes, input: &EncodedInput) -> Result<NodeId, ModelError> {
        let a = &input.alignment;
        let ids: Vec<usize> = a.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..a.seq_len()).collect();
        let tok = g.gather(nodes.token, &ids)?;
        let pos = g.gather(nodes.position, &positions)?;
        let seg = g.gather(nodes.segment, &a.segment_ids())?;
        let sum = g.add(tok, pos)?;
        Ok(g.add(sum, seg)?)
    }

    /// Runs the layer stack from embeddings `h0`.
    pub fn encode_on(
        &self,
        g: &mut Graph,
        nodes: &ModelNodes,
        h0: NodeId,
        input: &EncodedInput,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<NodeId, ModelError> {
        if let Some(t) = trace.as_deref_mut() {
            t.tokens = input.alignment.tokens.clone();
            t.content = input.alignment.slots.iter().map(|s| s.is_word()).collect();
        }
        let mut h = h0;
        for layer in &nodes.layers {
            h = layer_forward(
                g,
                h,
                layer,
                self.config.n_heads,
                &input.global_mask,
                input.local_mask.as_ref(),
                trace.as_deref_mut().map(|t| &mut t.layers),
            )?;
        }
        Ok(h)
    }

    fn head_on(&self, g: &mut Graph, nodes: &ModelNodes, h: NodeId, input: &EncodedInput) -> Result<NodeId, ModelError> {
        let rows = g.select_rows(h, &input.readout)?;
        Ok(g.affine(rows, nodes.head_weight, nodes.head_bias)?)
    }

    /// Mean cross-entropy of the input's targets, built on `g`.
    pub fn loss_on(&self, g: &mut Graph, nodes: &ModelNodes, input: &EncodedInput) -> Result<NodeId, ModelError> {
        let h0 = self.embed_on(g, nodes, input)?;
        let h = self.encode_on(g, nodes, h0, input, None)?;
        let logits = self.head_on(g, nodes, h, input)?;
        let targets: Vec<(usize, usize)> = input.targets.iter().copied().enumerate().collect();
        Ok(g.cross_entropy(logits, &targets)?)
    }

    /// Loss and the gradient of every tensor, in canonical order.
    pub fn loss_and_grads(&self, input: &EncodedInput) -> Result<(f64, Vec<Matrix>), ModelError> {
        self.batch_loss_and_grads(&[input])
    }

    /// Mean of the per-input losses and its gradients, on one tape.
    pub fn batch_loss_and_grads(&self, inputs: &[&EncodedInput]) -> Result<(f64, Vec<Matrix>), ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::EmptyTrainSet);
        }
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let mut total = self.loss_on(&mut g, &nodes, inputs[0])?;
        for input in &inputs[1..] {
            let l = self.loss_on(&mut g, &nodes, input)?;
            total = g.add(total, l)?;
        }
        let mean = g.scale(total, 1.0 / inputs.len() as f64);
        let value = g.value(mean).get(0, 0);
        let grads = g.backward(mean)?;
        let out = nodes
            .ids()
            .into_iter()
            .zip(self.tensors())
            .map(|(id, t)| grads.get_or_zeros(id, t.shape()))
            .collect();
        Ok((value, out))
    }

    pub fn loss(&self, input: &EncodedInput) -> Result<f64, ModelError> {
        let mut g = Graph::inference();
        let nodes = self.bind(&mut g);
        let loss = self.loss_on(&mut g, &nodes, input)?;
        Ok(g.value(loss).get(0, 0))
    }

    /// Inference pass, optionally capturing the attention trace.
    pub fn forward(&self, input: &EncodedInput, with_trace: bool) -> Result<ForwardOutput, ModelError> {
        let mut g = Graph::inference();
        let nodes = self.bind(&mut g);
        let mut trace = with_trace.then(AttentionTrace::default);
        let h0 = self.embed_on(&mut g, &nodes, input)?;
        let h = self.encode_on(&mut g, &nodes, h0, input, trace.as_mut())?;
        let logits = self.head_on(&mut g, &nodes, h, input)?;
        Ok(ForwardOutput {
            hidden: g.value(h).clone(),
            logits: g.value(logits).clone(),
            trace,
        })
    }

    /// Embedding matrix for `input` without running any layer.
    pub fn embed(&self, input: &EncodedInput) -> Result<Matrix, ModelError> {
        let mut g = Graph::inference();
        let nodes = self.bind(&mut g);
        let h0 = self.embed_on(&mut g, &nodes, input)?;
        Ok(g.value(h0).clone())
    }

    /// Runs the layer stack on caller-supplied embeddings `h0`.
    pub fn encode(
        &self,
        h0: &Matrix,
        input: &EncodedInput,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Matrix, ModelError> {
        if h0.shape() != (input.seq_len(), self.config.hidden) {
            return Err(ModelError::Config(format!(
                "embeddings are {:?}, expected ({}, {})",
                h0.shape(),
                input.seq_len(),
                self.config.hidden
            )));
        }
        let mut g = Graph::inference();
        let nodes = self.bind(&mut g);
        let x = g.leaf(h0.clone());
        let h = self.encode_on(&mut g, &nodes, x, input, trace)?;
        Ok(g.value(h).clone())
    }

    /// Adds uniform noise in `[-scale, scale)` to every tensor, so gates and
    /// biases leave their initial values. A non-positive scale is a no-op.
    pub fn perturb<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        if scale.is_nan() || scale <= 0.0 {
            return;
        }
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::{CLS, PAD, SEP, UNK};

    fn vocab() -> Vocabulary {
        let mut entries: Vec<String> = [PAD, UNK, CLS, SEP].map(String::from).to_vec();
        entries.extend(["a", "b", "c", "d"].map(String::from));
        Vocabulary::new(entries).unwrap()
    }

    fn sentence() -> DependencySentence {
        DependencySentence::new(
            "s",
            ["a", "b", "c", "d", "a"].map(String::from).to_vec(),
            [(0, 1), (1, 2), (1, 3), (3, 4)],
        )
        .unwrap()
    }

    fn small(mode: AttentionMode, n_layers: usize) -> SlaConfig {
        SlaConfig {
            n_layers,
            hidden: 8,
            n_heads: 2,
            mode,
            max_len: 16,
            seed: 3,
            ..SlaConfig::default()
        }
    }

    #[test]
    fn zero_layers_returns_embeddings() {
        let v = vocab();
        let model = SlaModel::new(small(AttentionMode::Sla, 0), v.len()).unwrap();
        let input = model.prepare(&[sentence()], &v).unwrap();
        let h0 = model.embed(&input).unwrap();
        assert_eq!(model.encode(&h0, &input, None).unwrap(), h0);
        assert_eq!(model.forward(&input, false).unwrap().hidden, h0);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let v = vocab();
        let a = SlaModel::new(small(AttentionMode::Sla, 2), v.len()).unwrap();
        let b = SlaModel::new(small(AttentionMode::Sla, 2), v.len()).unwrap();
        assert_eq!(a, b);
        let input = a.prepare(&[sentence()], &v).unwrap();
        assert_eq!(
            a.forward(&input, false).unwrap().hidden.data(),
            b.forward(&input, false).unwrap().hidden.data()
        );
        let c = SlaModel::new(SlaConfig { seed: 4, ..small(AttentionMode::Sla, 2) }, v.len()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn names_match_tensors() {
        let model = SlaModel::new(small(AttentionMode::Sla, 2), 8).unwrap();
        assert_eq!(model.tensor_names().len(), model.tensors().len());
        assert_eq!(model.tensor_names()[3 + 8], "layers.0.gate.weight");
        let mut g = Graph::new();
        assert_eq!(model.bind(&mut g).ids().len(), model.tensors().len());
    }

    #[test]
    fn mode_selects_local_mask() {
        let v = vocab();
        let sla = SlaModel::new(SlaConfig { m: 0, ..small(AttentionMode::Sla, 1) }, v.len()).unwrap();
        let input = sla.prepare(&[sentence()], &v).unwrap();
        let local = input.local_mask.as_ref().unwrap();
        // word 0 sees word 1 (D = 0 via neighbour) but not word 4
        assert!(local.is_allowed(1, 2));
        assert!(!local.is_allowed(1, 5));

        let global = SlaModel::new(small(AttentionMode::GlobalOnly, 1), v.len()).unwrap();
        assert!(global.prepare(&[sentence()], &v).unwrap().local_mask.is_none());

        let window = SlaModel::new(SlaConfig { k: 1, ..small(AttentionMode::Window, 1) }, v.len()).unwrap();
        let w = window.prepare(&[sentence()], &v).unwrap();
        assert!(!w.local_mask.unwrap().is_allowed(1, 3));
    }

    #[test]
    fn targets_follow_truncation() {
        let v = vocab();
        let model = SlaModel::new(SlaConfig { max_len: 5, ..small(AttentionMode::Sla, 1) }, v.len()).unwrap();
        let ex = LabeledExample {
            sentences: vec![sentence()],
            label: Label::Tokens(vec![1, 0, 1, 0, 1]),
        };
        let input = model.prepare_example(&ex, &v, 0).unwrap();
        assert_eq!(input.targets, vec![1, 0, 1]);
        assert_eq!(input.readout, vec![1, 2, 3]);
        assert_eq!(input.sentences[0].len(), 3);
    }

    #[test]
    fn vocabulary_size_must_match() {
        let v = vocab();
        let model = SlaModel::new(small(AttentionMode::Sla, 1), v.len() + 1).unwrap();
        assert!(matches!(model.prepare(&[sentence()], &v), Err(ModelError::Config(_))));
    }
}
