use rand::seq::SliceRandom;

use super::metrics::{accuracy, token_f1};
use super::{EncodedInput, LabeledExample, ModelError, SlaModel, Task};
use crate::rng::{stream, Stream};
use crate::subword::Vocabulary;
use crate::tensor::Matrix;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let p = p.data_mut();
            let m = m.data_mut();
            let v = v.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One line of the metric history. `dev_metric` is set on evaluation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub dev_metric: Option<f64>,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "step,loss,dev_metric";

    pub fn to_csv_line(&self) -> String {
        match self.dev_metric {
            Some(d) => format!("{},{:.12e},{:.12e}", self.step, self.loss, d),
            None => format!("{},{:.12e},", self.step, self.loss),
        }
    }
}

pub fn history_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(MetricRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Word-level F1 for token labeling, accuracy for classification.
    pub metric: f64,
    pub loss: f64,
    /// Per example, the predicted class of every readout position.
    pub predictions: Vec<Vec<usize>>,
}

pub struct TrainOutcome {
    /// Parameters at the best dev evaluation (the final ones without a dev set).
    pub best: SlaModel,
    pub last: SlaModel,
    pub best_metric: Option<f64>,
    pub best_step: usize,
    pub history: Vec<MetricRow>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }

    pub fn metrics_csv(&self) -> String {
        history_csv(&self.history)
    }
}

fn encode_all(model: &SlaModel, vocab: &Vocabulary, set: &[LabeledExample]) -> Result<Vec<EncodedInput>, ModelError> {
    set.iter()
        .enumerate()
        .map(|(i, ex)| model.prepare_example(ex, vocab, i))
        .collect()
}

fn evaluate_encoded(model: &SlaModel, inputs: &[EncodedInput]) -> Result<EvalResult, ModelError> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(inputs.len());
    for input in inputs {
        let out = model.forward(input, false)?;
        let p = out.predictions();
        loss += out.cross_entropy(&input.targets);
        pred.extend_from_slice(&p);
        gold.extend_from_slice(&input.targets);
        predictions.push(p);
    }
    let metric = match model.config.task {
        Task::TokenLabeling => token_f1(&pred, &gold),
        Task::SequenceClassification => accuracy(&pred, &gold),
    };
    Ok(EvalResult {
        metric,
        loss: if inputs.is_empty() { 0.0 } else { loss / inputs.len() as f64 },
        predictions,
    })
}

/// Scores `model` on a labeled set.
pub fn evaluate(model: &SlaModel, vocab: &Vocabulary, set: &[LabeledExample]) -> Result<EvalResult, ModelError> {
    evaluate_encoded(model, &encode_all(model, vocab, set)?)
}

/// Mini-batch Adam on mean cross-entropy. Batches are reshuffled every
/// epoch from the seed's shuffle stream; the dev set is scored every
/// `eval_every` steps and at the end of each epoch.
pub fn train(
    model: SlaModel,
    vocab: &Vocabulary,
    train_set: &[LabeledExample],
    dev_set: &[LabeledExample],
) -> Result<TrainOutcome, ModelError> {
    model.config.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptyTrainSet);
    }
    let cfg = model.config.clone();
    let train_inputs = encode_all(&model, vocab, train_set)?;
    let dev_inputs = encode_all(&model, vocab, dev_set)?;
    let mut model = model;
    let mut adam = Adam::new(cfg.learning_rate, model.tensors().iter().map(|t| t.shape()));
    let mut rng = stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_inputs.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, SlaModel)> = None;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut step = 0usize;

    let score = |model: &SlaModel, step: usize, best: &mut Option<(f64, usize, SlaModel)>| -> Result<Option<f64>, ModelError> {
        if dev_inputs.is_empty() {
            return Ok(None);
        }
        let r = evaluate_encoded(model, &dev_inputs)?;
        log::info!("step {step}: dev metric {:.4}, dev loss {:.4}", r.metric, r.loss);
        if best.as_ref().is_none_or(|(m, _, _)| r.metric > *m) {
            *best = Some((r.metric, step, model.clone()));
        }
        Ok(Some(r.metric))
    };

    'epochs: for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let n_batches = batches.len();
        for (b, batch) in batches.into_iter().enumerate() {
            if step >= max_steps {
                break 'epochs;
            }
            let inputs: Vec<&EncodedInput> = batch.iter().map(|&i| &train_inputs[i]).collect();
            let (loss, grads) = model.batch_loss_and_grads(&inputs)?;
            step += 1;
            if !loss.is_finite() {
                return Err(ModelError::Diverged { step, loss });
            }
            adam.step(model.tensors_mut(), &grads);
            if model.tensors().iter().any(|t| !t.is_finite()) {
                return Err(ModelError::Diverged { step, loss: f64::NAN });
            }
            let epoch_end = b + 1 == n_batches;
            let dev_metric = if step.is_multiple_of(cfg.eval_every) || epoch_end || step == max_steps {
                score(&model, step, &mut best)?
            } else {
                None
            };
            history.push(MetricRow { step, loss, dev_metric });
        }
    }

    let (best_metric, best_step, best_model) = match best {
        Some((m, s, b)) => (Some(m), s, b),
        None => (None, step, model.clone()),
    };
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        best_metric,
        best_step,
        history,
    })
}
