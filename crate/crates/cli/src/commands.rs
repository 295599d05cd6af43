use std::fs;
use std::path::Path;

use serde_json::json;
use sla_core::mask::{build_pair_mask, build_sla_mask, build_window_mask};
use sla_core::model::synth::{self, SynthOptions};
use sla_core::model::{
    attention_heatmap, evaluate, gate_statistics, gate_stats_csv, gradient_check, load_checkpoint, read_jsonl,
    save_checkpoint, train as fit, write_jsonl, AttentionMode, Label, Selection, SlaConfig, SlaModel, Task,
};
use sla_core::rng::{stream, Stream};
use sla_core::{
    all_pairs_distance, build_alignment, neighbor_min_distance, parse_conllu, AlignOptions, DependencySentence,
    MaskMode, MaskSidecar, NeighborDistance, Vocabulary,
};

use crate::error::CliError;
use crate::{AnalysisArgs, EvalArgs, ForwardArgs, GradcheckArgs, HeatmapArgs, MaskArgs, MaskModeArg, ModelFlags,
    SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))
}

fn read_conllu(path: &Path) -> Result<Vec<DependencySentence>> {
    let sentences = parse_conllu(&read_text(path)?)?;
    if sentences.is_empty() {
        return Err(CliError::Data(format!("{}: no sentences", path.display())));
    }
    Ok(sentences)
}

fn open_checkpoint(dir: &Path) -> Result<(SlaModel, Vocabulary)> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{}: not a checkpoint directory", dir.display())));
    }
    Ok(load_checkpoint(dir)?)
}

fn base_config(path: Option<&Path>) -> Result<SlaConfig> {
    match path {
        Some(p) => Ok(serde_json::from_str(&read_text(p)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?),
        None => Ok(SlaConfig::default()),
    }
}

/// Overrides that only change masking and tokenization; safe on a trained model.
fn apply_mask_flags(cfg: &mut SlaConfig, flags: &ModelFlags) {
    if let Some(mode) = flags.mode {
        cfg.mode = mode.into();
    }
    if let Some(m) = flags.m {
        cfg.m = m;
    }
    if let Some(k) = flags.k {
        cfg.k = k;
    }
    cfg.lowercase |= flags.lowercase;
    cfg.transpose_d |= flags.transpose_d;
}

fn resolve_config(flags: &ModelFlags) -> Result<SlaConfig> {
    let mut cfg = base_config(flags.config.as_deref())?;
    apply_mask_flags(&mut cfg, flags);
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(max_len) = flags.max_len {
        cfg.max_len = max_len;
    }
    Ok(cfg)
}

fn resolve_vocab<'a>(
    flags: &ModelFlags,
    sentences: impl IntoIterator<Item = &'a DependencySentence>,
    lowercase: bool,
) -> Result<Vocabulary> {
    match &flags.vocab {
        Some(p) => Ok(Vocabulary::from_text(&read_text(p)?)?),
        None => Ok(Vocabulary::whole_words(sentences, lowercase)),
    }
}

/// A trained model from `checkpoint`, or a fresh one built from the flags.
fn model_for<'a>(
    flags: &ModelFlags,
    checkpoint: Option<&Path>,
    sentences: impl IntoIterator<Item = &'a DependencySentence>,
) -> Result<(SlaModel, Vocabulary)> {
    let Some(dir) = checkpoint else {
        let cfg = resolve_config(flags)?;
        cfg.validate()?;
        let vocab = resolve_vocab(flags, sentences, cfg.lowercase)?;
        let model = SlaModel::new(cfg, vocab.len())?;
        return Ok((model, vocab));
    };
    if flags.config.is_some() || flags.vocab.is_some() || flags.max_len.is_some() || flags.seed.is_some() {
        return Err(CliError::Usage(
            "--config, --vocab, --max-len and --seed come from the checkpoint; drop them or --checkpoint".into(),
        ));
    }
    let (mut model, vocab) = open_checkpoint(dir)?;
    apply_mask_flags(&mut model.config, flags);
    Ok((model, vocab))
}

fn sentence_ids(sentences: &[&DependencySentence]) -> String {
    sentences
        .iter()
        .map(|s| s.sentence_id.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

fn distance(s: &DependencySentence, transpose: bool) -> NeighborDistance {
    let d = neighbor_min_distance(&all_pairs_distance(s));
    if transpose {
        d.transposed()
    } else {
        d
    }
}

pub fn mask(args: MaskArgs) -> Result<()> {
    let flags = ModelFlags {
        config: args.config.clone(),
        vocab: args.vocab.clone(),
        m: args.m,
        k: args.k,
        max_len: args.max_len,
        lowercase: args.lowercase,
        transpose_d: args.transpose_d,
        ..ModelFlags::default()
    };
    let cfg = resolve_config(&flags)?;
    let all = read_conllu(&args.conllu)?;
    let needed = if matches!(args.mode, MaskModeArg::Pair) { 2 } else { 1 };
    let picked: Vec<&DependencySentence> = all.iter().skip(args.sentence).take(needed).collect();
    if picked.len() < needed {
        return Err(CliError::Data(format!(
            "sentence {} (+{}) out of range: file has {} sentences",
            args.sentence,
            needed - 1,
            all.len()
        )));
    }
    let vocab = resolve_vocab(&flags, picked.iter().copied(), cfg.lowercase)?;
    let alignment = build_alignment(
        &picked,
        &vocab,
        AlignOptions {
            max_len: cfg.max_len,
            lowercase: cfg.lowercase,
        },
    )?;
    let kept: Vec<DependencySentence> = picked
        .iter()
        .enumerate()
        .map(|(i, s)| s.prefix(alignment.word_count(i)))
        .collect();
    let (mask, mode, m, k) = match args.mode {
        MaskModeArg::Sla => {
            let d = distance(&kept[0], cfg.transpose_d);
            (build_sla_mask(&d, cfg.m, &alignment)?, MaskMode::Sla, Some(cfg.m), None)
        }
        MaskModeArg::Window => (build_window_mask(&alignment, cfg.k), MaskMode::Window, None, Some(cfg.k)),
        MaskModeArg::Pair => {
            let d1 = distance(&kept[0], cfg.transpose_d);
            let d2 = distance(&kept[1], cfg.transpose_d);
            (build_pair_mask(&d1, &d2, cfg.m, &alignment)?, MaskMode::Pair, Some(cfg.m), None)
        }
    };
    let sidecar = MaskSidecar {
        len: mask.len(),
        mode,
        m,
        k,
        sentence_id: sentence_ids(&picked),
    };
    write_artifact(&args.out, "mask.csv", &mask.to_allow_csv())?;
    write_artifact(&args.out, "mask.json", &(serde_json::to_string_pretty(&sidecar)? + "\n"))
}

pub fn forward(args: ForwardArgs) -> Result<()> {
    let sentences = read_conllu(&args.conllu)?;
    let (model, vocab) = model_for(&args.model, args.checkpoint.as_deref(), &sentences)?;
    let mut out = String::new();
    for s in &sentences {
        let input = model.prepare(std::slice::from_ref(s), &vocab)?;
        let result = model.forward(&input, false)?;
        let tokens: Vec<&str> = input
            .alignment
            .ids
            .iter()
            .map(|&id| vocab.token(id).unwrap_or("[UNK]"))
            .collect();
        let logits: Vec<&[f64]> = (0..result.logits.rows()).map(|r| result.logits.row(r)).collect();
        let line = json!({
            "sentence_id": s.sentence_id,
            "tokens": tokens,
            "predictions": result.predictions(),
            "logits": logits,
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    write_artifact(&args.out, "forward.jsonl", &out)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let train_set = read_jsonl(&read_text(&args.train)?)?;
    let dev_set = match &args.dev {
        Some(p) => read_jsonl(&read_text(p)?)?,
        None => Vec::new(),
    };
    let mut cfg = resolve_config(&args.model)?;
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if args.max_steps.is_some() {
        cfg.max_steps = args.max_steps;
    }
    if let Some(v) = args.num_labels {
        cfg.num_labels = v;
    }
    if let Some(first) = train_set.first() {
        cfg.task = match first.label {
            Label::Class(_) => Task::SequenceClassification,
            Label::Tokens(_) => Task::TokenLabeling,
        };
    }
    cfg.validate()?;
    let all_sentences = train_set.iter().chain(&dev_set).flat_map(|ex| &ex.sentences);
    let vocab = resolve_vocab(&args.model, all_sentences, cfg.lowercase)?;
    let model = SlaModel::new(cfg, vocab.len())?;
    let outcome = fit(model, &vocab, &train_set, &dev_set)?;
    save_checkpoint(&args.out.join("checkpoint"), &outcome.best, &vocab)?;
    write_artifact(&args.out, "metrics.csv", &outcome.metrics_csv())?;
    match outcome.best_metric {
        Some(metric) => println!("best dev metric {metric:.6} at step {}", outcome.best_step),
        None => println!("trained {} steps (no dev set)", outcome.history.len()),
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (model, vocab) = open_checkpoint(&args.checkpoint)?;
    let data = read_jsonl(&read_text(&args.data)?)?;
    let result = evaluate(&model, &vocab, &data)?;
    let name = match model.config.task {
        Task::TokenLabeling => "f1",
        Task::SequenceClassification => "accuracy",
    };
    println!("{name} {:.6} loss {:.6}", result.metric, result.loss);
    if let Some(dir) = &args.out {
        let report = json!({
            "metric": name,
            "value": result.metric,
            "loss": result.loss,
            "examples": data.len(),
            "predictions": result.predictions,
        });
        write_artifact(dir, "eval.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.model)?;
    cfg.task = Task::TokenLabeling;
    cfg.validate()?;
    if !(args.eps > 0.0 && args.eps.is_finite()) {
        return Err(CliError::Usage(format!("--eps must be positive, got {}", args.eps)));
    }
    let data = synth::generate(&SynthOptions {
        train: 1,
        dev: 0,
        seed: cfg.seed,
        ..SynthOptions::default()
    });
    let vocab = match &args.model.vocab {
        Some(_) => return Err(CliError::Usage("gradcheck uses the synthetic vocabulary; drop --vocab".into())),
        None => data.vocab,
    };
    let mut model = SlaModel::new(cfg.clone(), vocab.len())?;
    model.perturb(&mut stream(cfg.seed, Stream::Inputs), args.perturb);
    let input = model.prepare_example(&data.train[0], &vocab, 0)?;
    let selection = match args.samples {
        0 => Selection::All,
        n => Selection::Sampled {
            per_tensor: n,
            seed: cfg.seed,
        },
    };
    let report = gradient_check(&model, &input, selection, args.eps)?;
    let worst = report.max_rel_error();
    println!("max relative error {worst:.3e} over {} coordinates", report.checked());
    if let Some(dir) = &args.out {
        let mut csv = String::from("tensor,checked,max_rel_error,max_abs_error\n");
        for g in &report.groups {
            csv.push_str(&format!(
                "{},{},{:.12e},{:.12e}\n",
                g.name, g.checked, g.max_rel_error, g.max_abs_error
            ));
        }
        write_artifact(dir, "gradcheck.csv", &csv)?;
    }
    if worst.is_nan() || worst >= args.tolerance {
        return Err(CliError::Numeric(format!(
            "gradient check failed: {worst:.3e} >= {:.1e}",
            args.tolerance
        )));
    }
    Ok(())
}

/// Sentence groups to analyse: dataset examples or single CoNLL-U sentences.
fn analysis_inputs(args: &AnalysisArgs) -> Result<Vec<Vec<DependencySentence>>> {
    match (&args.data, &args.conllu) {
        (Some(p), _) => Ok(read_jsonl(&read_text(p)?)?
            .into_iter()
            .map(|ex| ex.sentences)
            .collect()),
        (None, Some(p)) => Ok(read_conllu(p)?.into_iter().map(|s| vec![s]).collect()),
        (None, None) => Err(CliError::Usage("one of --data or --conllu is required".into())),
    }
}

fn traced_model(args: &AnalysisArgs, inputs: &[Vec<DependencySentence>]) -> Result<(SlaModel, Vocabulary)> {
    let (model, vocab) = model_for(&args.model, args.checkpoint.as_deref(), inputs.iter().flatten())?;
    if model.config.mode == AttentionMode::GlobalOnly {
        return Err(CliError::Usage("global-only mode has no gate or local scores".into()));
    }
    Ok((model, vocab))
}

pub fn gate_stats(args: AnalysisArgs) -> Result<()> {
    let inputs = analysis_inputs(&args)?;
    let (model, vocab) = traced_model(&args, &inputs)?;
    let mut traces = Vec::with_capacity(inputs.len());
    for sentences in &inputs {
        let input = model.prepare(sentences, &vocab)?;
        let out = model.forward(&input, true)?;
        traces.extend(out.trace);
    }
    let means = gate_statistics(&traces)?;
    write_artifact(&args.out, "gate_stats.csv", &gate_stats_csv(&means))
}

pub fn heatmap(args: HeatmapArgs) -> Result<()> {
    let inputs = analysis_inputs(&args.analysis)?;
    let Some(sentences) = inputs.get(args.index) else {
        return Err(CliError::Data(format!(
            "input {} out of range: {} inputs",
            args.index,
            inputs.len()
        )));
    };
    let (model, vocab) = traced_model(&args.analysis, &inputs)?;
    let input = model.prepare(sentences, &vocab)?;
    let trace = model
        .forward(&input, true)?
        .trace
        .ok_or_else(|| CliError::Numeric("forward pass recorded no trace".into()))?;
    let map = attention_heatmap(&trace)?;
    write_artifact(&args.analysis.out, "heatmap.csv", &map.to_csv())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let defaults = SynthOptions::default();
    let opts = SynthOptions {
        train: args.train,
        dev: args.dev,
        radius: args.radius,
        min_words: args.min_words.unwrap_or(defaults.min_words),
        max_words: args.max_words.unwrap_or(defaults.max_words),
        seed: args.seed,
        ..defaults
    };
    if opts.min_words == 0 || opts.min_words > opts.max_words {
        return Err(CliError::Usage(format!(
            "need 1 <= --min-words <= --max-words, got {} and {}",
            opts.min_words, opts.max_words
        )));
    }
    let data = synth::generate(&opts);
    write_artifact(&args.out, "train.jsonl", &write_jsonl(&data.train))?;
    write_artifact(&args.out, "dev.jsonl", &write_jsonl(&data.dev))?;
    write_artifact(&args.out, "vocab.txt", &data.vocab.to_text())
}
