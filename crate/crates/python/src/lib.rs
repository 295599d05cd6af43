//! Python bindings: parsing, masks, the encoder and its analysis tools.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use sla_core::mask::{build_pair_mask, build_sla_mask, build_window_mask};
use sla_core::model::synth::{self, SynthOptions};
use sla_core::model::{
    attention_heatmap, gate_statistics, gradient_check, load_checkpoint, read_jsonl, save_checkpoint, train,
    write_jsonl, ModelError, Selection,
};
use sla_core::rng::{stream, Stream};
use sla_core::subword::wordpiece_tokenize;
use sla_core::syntax::UNREACHABLE;
use sla_core::{
    all_pairs_distance, build_alignment, neighbor_min_distance, AdditiveMask, AlignOptions, DependencySentence,
    SlaConfig, SlaModel, SubwordAlignment,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn model_err(e: ModelError) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        value_err(e)
    }
}

/// One parsed sentence with its undirected dependency edges.
#[pyclass(name = "Sentence", frozen, from_py_object)]
#[derive(Clone)]
struct PySentence {
    inner: DependencySentence,
}

#[pymethods]
impl PySentence {
    #[new]
    fn new(sentence_id: String, words: Vec<String>, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        DependencySentence::new(sentence_id, words, edges)
            .map(|inner| Self { inner })
            .ok_or_else(|| value_err("edges must join distinct in-range words, without duplicates"))
    }

    #[getter]
    fn sentence_id(&self) -> String {
        self.inner.sentence_id.clone()
    }

    #[getter]
    fn words(&self) -> Vec<String> {
        self.inner.words.clone()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Tree distances; `None` between disconnected words.
    fn distances(&self) -> Vec<Vec<Option<u32>>> {
        let d = all_pairs_distance(&self.inner);
        (0..d.len())
            .map(|i| (0..d.len()).map(|j| Some(d.get(i, j)).filter(|&v| v != UNREACHABLE)).collect())
            .collect()
    }

    /// Minimum tree distance from word `i` or its linear neighbours to `j`.
    fn neighbor_distances(&self) -> Vec<Vec<Option<u32>>> {
        let d = neighbor_min_distance(&all_pairs_distance(&self.inner));
        (0..d.len())
            .map(|i| (0..d.len()).map(|j| Some(d.get(i, j)).filter(|&v| v != UNREACHABLE)).collect())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Sentence({:?}, {} words)", self.inner.sentence_id, self.inner.len())
    }
}

fn unwrap_sentences(sentences: &[PySentence]) -> Vec<DependencySentence> {
    sentences.iter().map(|s| s.inner.clone()).collect()
}

#[pyfunction]
fn parse_conllu(text: &str) -> PyResult<Vec<PySentence>> {
    let parsed = sla_core::parse_conllu(text).map_err(value_err)?;
    Ok(parsed.into_iter().map(|inner| PySentence { inner }).collect())
}

#[pyclass(name = "Vocabulary", frozen, from_py_object)]
#[derive(Clone)]
struct PyVocabulary {
    inner: sla_core::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// One subword per line, as in a BERT `vocab.txt`.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        sla_core::Vocabulary::from_text(text)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    /// Special tokens plus every distinct word of `sentences`.
    #[staticmethod]
    #[pyo3(signature = (sentences, lowercase = false))]
    fn whole_words(sentences: Vec<PySentence>, lowercase: bool) -> Self {
        let inner = sla_core::Vocabulary::whole_words(sentences.iter().map(|s| &s.inner), lowercase);
        Self { inner }
    }

    fn tokenize(&self, word: &str) -> Vec<String> {
        wordpiece_tokenize(word, &self.inner)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn align(
    sentences: &[&DependencySentence],
    vocab: &PyVocabulary,
    max_len: usize,
    lowercase: bool,
) -> PyResult<SubwordAlignment> {
    build_alignment(sentences, &vocab.inner, AlignOptions { max_len, lowercase }).map_err(value_err)
}

fn allow_bits(mask: &AdditiveMask) -> Vec<Vec<bool>> {
    (0..mask.len())
        .map(|q| (0..mask.len()).map(|k| mask.is_allowed(q, k)).collect())
        .collect()
}

/// Syntax-aware allow matrix over `[CLS] subwords [SEP]`.
#[pyfunction]
#[pyo3(signature = (sentence, vocab, m, max_len = 128, lowercase = false, transpose_d = false))]
fn sla_mask(
    sentence: &PySentence,
    vocab: &PyVocabulary,
    m: u32,
    max_len: usize,
    lowercase: bool,
    transpose_d: bool,
) -> PyResult<Vec<Vec<bool>>> {
    let a = align(&[&sentence.inner], vocab, max_len, lowercase)?;
    let kept = sentence.inner.prefix(a.word_count(0));
    let mut d = neighbor_min_distance(&all_pairs_distance(&kept));
    if transpose_d {
        d = d.transposed();
    }
    Ok(allow_bits(&build_sla_mask(&d, m, &a).map_err(value_err)?))
}

#[pyfunction]
#[pyo3(signature = (sentence, vocab, k, max_len = 128, lowercase = false))]
fn window_mask(
    sentence: &PySentence,
    vocab: &PyVocabulary,
    k: usize,
    max_len: usize,
    lowercase: bool,
) -> PyResult<Vec<Vec<bool>>> {
    let a = align(&[&sentence.inner], vocab, max_len, lowercase)?;
    Ok(allow_bits(&build_window_mask(&a, k)))
}

/// Allow matrix for `[CLS] s1 [SEP] s2 [SEP]`: syntax blocks per sentence,
/// open across sentences.
#[pyfunction]
#[pyo3(signature = (first, second, vocab, m, max_len = 128, lowercase = false))]
fn pair_mask(
    first: &PySentence,
    second: &PySentence,
    vocab: &PyVocabulary,
    m: u32,
    max_len: usize,
    lowercase: bool,
) -> PyResult<Vec<Vec<bool>>> {
    let a = align(&[&first.inner, &second.inner], vocab, max_len, lowercase)?;
    let d1 = neighbor_min_distance(&all_pairs_distance(&first.inner.prefix(a.word_count(0))));
    let d2 = neighbor_min_distance(&all_pairs_distance(&second.inner.prefix(a.word_count(1))));
    Ok(allow_bits(&build_pair_mask(&d1, &d2, m, &a).map_err(value_err)?))
}

/// The gated encoder with a token or sequence classification head.
#[pyclass(name = "Model")]
struct PyModel {
    inner: SlaModel,
}

#[pymethods]
impl PyModel {
    /// `config_json` holds any subset of the config fields; the rest default.
    #[new]
    #[pyo3(signature = (vocab_size, config_json = None))]
    fn new(vocab_size: usize, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: SlaConfig = match config_json {
            Some(text) => serde_json::from_str(text).map_err(value_err)?,
            None => SlaConfig::default(),
        };
        SlaModel::new(cfg, vocab_size).map(|inner| Self { inner }).map_err(model_err)
    }

    /// Loads a checkpoint directory, returning `(model, vocabulary)`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<(Self, PyVocabulary)> {
        let (inner, vocab) = load_checkpoint(&dir).map_err(model_err)?;
        Ok((Self { inner }, PyVocabulary { inner: vocab }))
    }

    fn save(&self, dir: PathBuf, vocab: &PyVocabulary) -> PyResult<()> {
        save_checkpoint(&dir, &self.inner, &vocab.inner).map_err(model_err)
    }

    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensor_names()
    }

    fn set_gate_bias(&mut self, bias: f64) {
        self.inner.set_gate_bias(bias);
    }

    /// Logits and argmax predictions for one or two sentences, as a dict.
    fn forward<'py>(
        &self,
        py: Python<'py>,
        sentences: Vec<PySentence>,
        vocab: &PyVocabulary,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let input = self.inner.prepare(&unwrap_sentences(&sentences), &vocab.inner).map_err(model_err)?;
        let out = self.inner.forward(&input, false).map_err(model_err)?;
        let logits: Vec<Vec<f64>> = (0..out.logits.rows()).map(|r| out.logits.row(r).to_vec()).collect();
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item("tokens", input.alignment.tokens.clone())?;
        dict.set_item("logits", logits)?;
        dict.set_item("predictions", out.predictions())?;
        Ok(dict)
    }

    /// Per-layer mean gate over the content tokens of `inputs`, each a list
    /// of one or two sentences.
    fn gate_stats(&self, inputs: Vec<Vec<PySentence>>, vocab: &PyVocabulary) -> PyResult<Vec<f64>> {
        let mut traces = Vec::with_capacity(inputs.len());
        for sentences in &inputs {
            let input = self.inner.prepare(&unwrap_sentences(sentences), &vocab.inner).map_err(model_err)?;
            traces.extend(self.inner.forward(&input, true).map_err(model_err)?.trace);
        }
        gate_statistics(&traces).map_err(model_err)
    }

    /// `(labels, matrix)` of mixed attention averaged over heads and layers,
    /// restricted to word positions.
    fn heatmap(&self, sentences: Vec<PySentence>, vocab: &PyVocabulary) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
        let input = self.inner.prepare(&unwrap_sentences(&sentences), &vocab.inner).map_err(model_err)?;
        let trace = self.inner.forward(&input, true).map_err(model_err)?.trace;
        let map = attention_heatmap(&trace.unwrap_or_default()).map_err(model_err)?;
        let matrix = (0..map.matrix.rows()).map(|r| map.matrix.row(r).to_vec()).collect();
        Ok((map.labels, matrix))
    }

    /// Largest relative gap between backprop and central differences on
    /// `sentences` with token labels `labels`.
    #[pyo3(signature = (sentences, labels, vocab, eps = 1e-5, per_tensor = 8, seed = 0))]
    fn gradcheck(
        &self,
        sentences: Vec<PySentence>,
        labels: Vec<usize>,
        vocab: &PyVocabulary,
        eps: f64,
        per_tensor: usize,
        seed: u64,
    ) -> PyResult<f64> {
        let example = sla_core::model::LabeledExample {
            sentences: unwrap_sentences(&sentences),
            label: sla_core::model::Label::Tokens(labels),
        };
        let input = self.inner.prepare_example(&example, &vocab.inner, 0).map_err(model_err)?;
        let selection = match per_tensor {
            0 => Selection::All,
            n => Selection::Sampled { per_tensor: n, seed },
        };
        let report = gradient_check(&self.inner, &input, selection, eps).map_err(model_err)?;
        Ok(report.max_rel_error())
    }

    /// Adds uniform noise in `[-scale, scale)` to every parameter.
    fn perturb(&mut self, scale: f64, seed: u64) {
        self.inner.perturb(&mut stream(seed, Stream::Inputs), scale);
    }
}

/// Trains a fresh model on JSON-lines text; returns `(best_model, metrics_csv)`.
#[pyfunction]
#[pyo3(signature = (train_jsonl, vocab, dev_jsonl = "", config_json = None))]
fn train_model(
    train_jsonl: &str,
    vocab: &PyVocabulary,
    dev_jsonl: &str,
    config_json: Option<&str>,
) -> PyResult<(PyModel, String)> {
    let cfg: SlaConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(value_err)?,
        None => SlaConfig::default(),
    };
    let train_set = read_jsonl(train_jsonl).map_err(model_err)?;
    let dev_set = read_jsonl(dev_jsonl).map_err(model_err)?;
    let model = SlaModel::new(cfg, vocab.inner.len()).map_err(model_err)?;
    let out = train(model, &vocab.inner, &train_set, &dev_set).map_err(model_err)?;
    let csv = out.metrics_csv();
    Ok((PyModel { inner: out.best }, csv))
}

/// Seeded synthetic dataset as `(train_jsonl, dev_jsonl, vocabulary)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, train = 2000, dev = 500, radius = 3))]
fn synthetic_dataset(seed: u64, train: usize, dev: usize, radius: u32) -> (String, String, PyVocabulary) {
    let data = synth::generate(&SynthOptions {
        seed,
        train,
        dev,
        radius,
        ..SynthOptions::default()
    });
    (
        write_jsonl(&data.train),
        write_jsonl(&data.dev),
        PyVocabulary { inner: data.vocab },
    )
}

#[pymodule]
fn sla_attention(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySentence>()?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(parse_conllu, m)?)?;
    m.add_function(wrap_pyfunction!(sla_mask, m)?)?;
    m.add_function(wrap_pyfunction!(window_mask, m)?)?;
    m.add_function(wrap_pyfunction!(pair_mask, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    Ok(())
}
