use serde::{Deserialize, Serialize};

use super::{ModelError, Task};
use crate::syntax::{parse_conllu, render_conllu, DependencySentence};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Tokens(Vec<usize>),
}

impl Label {
    pub fn max_class(&self) -> usize {
        match self {
            Label::Class(c) => *c,
            Label::Tokens(ts) => ts.iter().copied().max().unwrap_or(0),
        }
    }
}

/// One or two parsed sentences with their gold label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub sentences: Vec<DependencySentence>,
    pub label: Label,
}

impl LabeledExample {
    pub fn validate(&self, index: usize, task: Task) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::Example { index, reason });
        if !(1..=2).contains(&self.sentences.len()) {
            return fail(format!("expected 1 or 2 sentences, got {}", self.sentences.len()));
        }
        match (&self.label, task) {
            (Label::Tokens(ts), Task::TokenLabeling) => {
                let n = self.sentences[0].len();
                if ts.len() != n {
                    return fail(format!("{} token labels for {n} words", ts.len()));
                }
            }
            (Label::Class(_), Task::SequenceClassification) => {}
            (_, task) => return fail(format!("label shape does not fit task {task}")),
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    conllu: String,
    label: Label,
}

/// Parses JSON-lines records `{"conllu": "...", "label": 1 | [0, 1, ...]}`.
/// Blank lines are skipped.
pub fn read_jsonl(text: &str) -> Result<Vec<LabeledExample>, ModelError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(line).map_err(|e| ModelError::Example {
            index: i,
            reason: e.to_string(),
        })?;
        let sentences = parse_conllu(&rec.conllu).map_err(|e| ModelError::Example {
            index: i,
            reason: e.to_string(),
        })?;
        out.push(LabeledExample {
            sentences,
            label: rec.label,
        });
    }
    Ok(out)
}

pub fn write_jsonl(examples: &[LabeledExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let line = Line {
            conllu: render_conllu(&ex.sentences),
            label: ex.label.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence() -> DependencySentence {
        DependencySentence::new("s", vec!["a".into(), "b".into()], [(0, 1)]).unwrap()
    }

    #[test]
    fn jsonl_round_trip() {
        let examples = vec![
            LabeledExample {
                sentences: vec![sentence()],
                label: Label::Tokens(vec![0, 1]),
            },
            LabeledExample {
                sentences: vec![sentence(), sentence()],
                label: Label::Class(3),
            },
        ];
        let back = read_jsonl(&write_jsonl(&examples)).unwrap();
        assert_eq!(back, examples);
    }

    #[test]
    fn validation_rules() {
        let ex = LabeledExample {
            sentences: vec![sentence()],
            label: Label::Tokens(vec![0]),
        };
        assert!(ex.validate(0, Task::TokenLabeling).is_err());
        assert!(ex.validate(0, Task::SequenceClassification).is_err());
        let ex = LabeledExample {
            sentences: vec![sentence()],
            label: Label::Class(1),
        };
        assert!(ex.validate(0, Task::SequenceClassification).is_ok());
    }

    #[test]
    fn bad_line_reports_index() {
        let err = read_jsonl("\n{\"conllu\": 3}\n").unwrap_err();
        assert!(matches!(err, ModelError::Example { index: 1, .. }));
    }
}
