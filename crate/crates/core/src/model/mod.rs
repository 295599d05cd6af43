//! Encoder stack, training loop and the analysis procedures built on it.

mod analysis;
mod checkpoint;
mod config;
mod data;
mod encoder;
mod gradcheck;
mod metrics;
pub mod synth;
mod train;

use thiserror::Error;

use crate::mask::MaskError;
use crate::subword::AlignError;
use crate::syntax::ParseError;
use crate::tensor::TensorError;

pub use analysis::{attention_heatmap, gate_statistics, gate_stats_csv, Heatmap};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, MANIFEST_FILE, PARAMS_FILE, VOCAB_FILE,
};
pub use config::{AttentionMode, SlaConfig, Task};
pub use data::{read_jsonl, write_jsonl, Label, LabeledExample};
pub use encoder::{EncodedInput, ForwardOutput, ModelNodes, SlaModel};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, GroupError, Selection, GRAD_FLOOR};
pub use metrics::{accuracy, token_f1};
pub use train::{evaluate, history_csv, train, Adam, EvalResult, MetricRow, TrainOutcome};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("example {index}: {reason}")]
    Example { index: usize, reason: String },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("trace is empty")]
    EmptyTrace,
    #[error("loss became non-finite ({loss}) at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ModelError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ModelError::Diverged { .. }
                | ModelError::Tensor(TensorError::NonFinite(_))
                | ModelError::Tensor(TensorError::NotRecorded)
        )
    }
}
