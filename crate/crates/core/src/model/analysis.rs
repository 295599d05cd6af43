use super::ModelError;
use crate::attention::AttentionTrace;
use crate::tensor::Matrix;

/// Per layer, the mean gate over every content position (no specials, no
/// padding) of every trace, pooled by token.
pub fn gate_statistics(traces: &[AttentionTrace]) -> Result<Vec<f64>, ModelError> {
    let n_layers = traces.first().map_or(0, |t| t.layers.len());
    if n_layers == 0 {
        return Err(ModelError::EmptyTrace);
    }
    let mut sums = vec![0.0; n_layers];
    let mut count = 0usize;
    for t in traces {
        if t.layers.len() != n_layers {
            return Err(ModelError::Config(format!(
                "traces disagree on layer count ({} vs {n_layers})",
                t.layers.len()
            )));
        }
        for (pos, _) in t.content.iter().enumerate().filter(|(_, &c)| c) {
            count += 1;
            for (s, layer) in sums.iter_mut().zip(&t.layers) {
                *s += layer.gate[pos];
            }
        }
    }
    if count == 0 {
        return Err(ModelError::EmptyTrace);
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

pub fn gate_stats_csv(means: &[f64]) -> String {
    let mut out = String::from("layer,mean_gate\n");
    for (i, g) in means.iter().enumerate() {
        out.push_str(&format!("{i},{g:.12e}\n"));
    }
    out
}

/// Mixed attention scores averaged over every head of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `L x L` average before any position is removed.
    pub full: Matrix,
    /// Positions kept: content tokens only.
    pub positions: Vec<usize>,
    pub labels: Vec<String>,
    /// `full` restricted to `positions`; rows are not renormalized.
    pub matrix: Matrix,
}

impl Heatmap {
    /// CSV with a header of token labels and one labeled row per token.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let header = std::iter::once("").chain(self.labels.iter().map(String::as_str));
        w.write_record(header).expect("in-memory write");
        for (r, label) in self.labels.iter().enumerate() {
            let row = std::iter::once(label.clone())
                .chain(self.matrix.row(r).iter().map(|v| format!("{v:.12e}")));
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }
}

/// Averages `g_i * S_loc + (1 - g_i) * S_glb` over all heads and layers,
/// then drops the rows and columns of `[CLS]`, `[SEP]` and padding.
pub fn attention_heatmap(trace: &AttentionTrace) -> Result<Heatmap, ModelError> {
    let len = trace.seq_len();
    let mut full = Matrix::zeros(len, len);
    let mut n = 0usize;
    for layer in &trace.layers {
        for s in layer.mixed() {
            full.add_assign(&s)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(ModelError::EmptyTrace);
    }
    let full = full.scale(1.0 / n as f64);
    let positions: Vec<usize> = (0..len).filter(|&p| trace.content[p]).collect();
    let matrix = Matrix::from_fn(positions.len(), positions.len(), |r, c| {
        full.get(positions[r], positions[c])
    });
    Ok(Heatmap {
        labels: positions.iter().map(|&p| trace.tokens[p].clone()).collect(),
        full,
        positions,
        matrix,
    })
}
