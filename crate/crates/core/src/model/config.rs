use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Which local attention feeds the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Dependency-distance mask with threshold `m`.
    #[default]
    Sla,
    /// Linear window of `2k + 1` words.
    Window,
    /// No local branch; a standard transformer encoder.
    GlobalOnly,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Sla => "sla",
            AttentionMode::Window => "window",
            AttentionMode::GlobalOnly => "global-only",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sla" => Ok(Self::Sla),
            "window" => Ok(Self::Window),
            "global-only" => Ok(Self::GlobalOnly),
            other => Err(format!("unknown attention mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// One label per example, read out at `[CLS]`.
    SequenceClassification,
    /// One label per word of the first sentence, read out at its first subword.
    #[default]
    TokenLabeling,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::SequenceClassification => "sequence-classification",
            Task::TokenLabeling => "token-labeling",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequence-classification" => Ok(Self::SequenceClassification),
            "token-labeling" => Ok(Self::TokenLabeling),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// Model, masking and training settings. Unlisted JSON fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlaConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    /// Syntax threshold: word `i` sees word `j` locally iff `D(i, j) <= m`.
    pub m: u32,
    /// Half-width of the window baseline.
    pub k: usize,
    pub mode: AttentionMode,
    pub max_len: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub task: Task,
    pub num_labels: usize,
    pub lowercase: bool,
    /// Dev evaluation cadence in optimizer steps.
    pub eval_every: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Threshold `D(j, i)` instead of `D(i, j)` for query `i`, key `j`.
    pub transpose_d: bool,
}

impl Default for SlaConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            hidden: 64,
            n_heads: 4,
            m: 3,
            k: 3,
            mode: AttentionMode::Sla,
            max_len: 64,
            seed: 0,
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 16,
            task: Task::TokenLabeling,
            num_labels: 2,
            lowercase: false,
            eval_every: 100,
            max_steps: None,
            transpose_d: false,
        }
    }
}

impl SlaConfig {
    /// BERT-base sized encoder: 12 layers, hidden 768, 12 heads.
    pub fn base() -> Self {
        Self {
            n_layers: 12,
            hidden: 768,
            n_heads: 12,
            max_len: 128,
            batch_size: 32,
            learning_rate: 2e-5,
            ..Self::default()
        }
    }

    /// BERT-large sized encoder: 24 layers, hidden 1024, 16 heads.
    pub fn large() -> Self {
        Self {
            n_layers: 24,
            hidden: 1024,
            n_heads: 16,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.n_heads == 0 || !self.hidden.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden ({}) must be a positive multiple of n_heads ({})",
                self.hidden, self.n_heads
            ));
        }
        if self.max_len < 3 {
            return fail(format!("max_len must be at least 3, got {}", self.max_len));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.num_labels < 2 {
            return fail(format!("num_labels must be at least 2, got {}", self.num_labels));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return fail(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        Ok(())
    }

    /// Gate parameters added on top of a standard encoder: one `hidden x 1`
    /// weight and one bias per layer.
    pub fn gate_parameter_count(&self) -> usize {
        self.n_layers * (self.hidden + 1)
    }
}
