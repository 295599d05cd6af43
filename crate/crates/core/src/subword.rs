//! WordPiece segmentation of parser words and the word-to-subword layout of
//! the model input.

use std::collections::HashMap;
use std::ops::Range;

use thiserror::Error;

use crate::syntax::DependencySentence;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";

const CONTINUATION: &str = "##";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignError {
    #[error("vocabulary is missing required special token {0}")]
    MissingSpecial(&'static str),
    #[error("vocabulary entry {0:?} appears more than once")]
    DuplicateEntry(String),
    #[error("max_len must be at least 3, got {0}")]
    MaxLenTooSmall(usize),
    #[error("expected one or two sentences, got {0}")]
    SentenceCount(usize),
    #[error("word {word:?} needs {pieces} subwords but at most {room} fit")]
    WordTooLong {
        word: String,
        pieces: usize,
        room: usize,
    },
    #[error("padding target {target} is shorter than the sequence ({len})")]
    PadTooShort { target: usize, len: usize },
}

/// BERT-style subword vocabulary; line index in the vocabulary file is the id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(entries: Vec<String>) -> Result<Self, AlignError> {
        let mut ids = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if ids.insert(e.clone(), i as u32).is_some() {
                return Err(AlignError::DuplicateEntry(e.clone()));
            }
        }
        for special in [CLS, SEP, UNK, PAD] {
            if !ids.contains_key(special) {
                return Err(AlignError::MissingSpecial(special));
            }
        }
        Ok(Self { entries, ids })
    }

    /// Parses a vocabulary file: one entry per line, trailing blank lines ignored.
    pub fn from_text(text: &str) -> Result<Self, AlignError> {
        let mut entries: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        while entries.last().is_some_and(|e| e.is_empty()) {
            entries.pop();
        }
        Self::new(entries)
    }

    /// Specials followed by every distinct word of `sentences`, each as a
    /// single whole-word piece, in first-seen order.
    pub fn whole_words<'a>(
        sentences: impl IntoIterator<Item = &'a DependencySentence>,
        lowercase: bool,
    ) -> Self {
        let mut entries: Vec<String> = [PAD, UNK, CLS, SEP].map(String::from).to_vec();
        let mut seen: std::collections::HashSet<String> = entries.iter().cloned().collect();
        for s in sentences {
            for w in &s.words {
                let w = normalize(w, lowercase);
                if seen.insert(w.clone()) {
                    entries.push(w);
                }
            }
        }
        Self::new(entries).expect("specials present and entries deduplicated")
    }

    pub fn to_text(&self) -> String {
        let mut out = self.entries.join("\n");
        out.push('\n');
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    fn special_id(&self, token: &str) -> u32 {
        self.ids[token]
    }
}

fn normalize(word: &str, lowercase: bool) -> String {
    if lowercase {
        word.to_lowercase()
    } else {
        word.to_string()
    }
}

/// Greedy longest-match-first WordPiece. Falls back to a single `[UNK]` when
/// any remainder has no matching piece.
pub fn wordpiece_tokenize(word: &str, vocab: &Vocabulary) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, CONTINUATION);
            }
            if vocab.contains(&candidate) {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece) => {
                pieces.push(piece);
                start = end;
            }
            None => return vec![UNK.to_string()],
        }
    }
    if pieces.is_empty() {
        vec![UNK.to_string()]
    } else {
        pieces
    }
}

/// What occupies one position of the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Cls,
    Sep,
    /// A subword of `word` (0-based) in `sentence` (0 or 1).
    Word { sentence: usize, word: usize },
    Pad,
}

impl Slot {
    pub fn is_special(self) -> bool {
        matches!(self, Slot::Cls | Slot::Sep)
    }

    pub fn is_word(self) -> bool {
        matches!(self, Slot::Word { .. })
    }
}

/// Layout of `[CLS] s1 [SEP] (s2 [SEP]) [PAD]*` with the subword span of
/// every kept parser word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordAlignment {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    pub slots: Vec<Slot>,
    /// Per sentence, the half-open subword range of each kept word.
    pub word_spans: Vec<Vec<Range<usize>>>,
    pub sep_pos: Vec<usize>,
    pub pad_from: usize,
}

impl SubwordAlignment {
    pub const CLS_POS: usize = 0;

    pub fn seq_len(&self) -> usize {
        self.slots.len()
    }

    pub fn sentence_count(&self) -> usize {
        self.word_spans.len()
    }

    /// Words kept from sentence `s` after truncation.
    pub fn word_count(&self, s: usize) -> usize {
        self.word_spans[s].len()
    }

    /// Sentence index of a word position; `None` for specials and padding.
    pub fn sentence_of(&self, pos: usize) -> Option<usize> {
        match self.slots[pos] {
            Slot::Word { sentence, .. } => Some(sentence),
            _ => None,
        }
    }

    /// Segment id for embeddings: 0 up to and including the first `[SEP]`,
    /// 1 afterwards (padding included).
    pub fn segment_ids(&self) -> Vec<usize> {
        let boundary = self.sep_pos.first().map_or(usize::MAX, |&p| p);
        (0..self.seq_len())
            .map(|p| usize::from(p > boundary))
            .collect()
    }

    /// First subword position of every kept word of sentence `s`.
    pub fn first_subwords(&self, s: usize) -> Vec<usize> {
        self.word_spans[s].iter().map(|r| r.start).collect()
    }

    pub fn is_pad(&self, pos: usize) -> bool {
        pos >= self.pad_from
    }

    /// Appends `[PAD]` up to `target` positions.
    pub fn padded(mut self, target: usize, vocab: &Vocabulary) -> Result<Self, AlignError> {
        let len = self.seq_len();
        if target < len {
            return Err(AlignError::PadTooShort { target, len });
        }
        let pad_id = vocab.special_id(PAD);
        for _ in len..target {
            self.tokens.push(PAD.to_string());
            self.ids.push(pad_id);
            self.slots.push(Slot::Pad);
        }
        Ok(self)
    }
}

/// Options for [`build_alignment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignOptions {
    pub max_len: usize,
    pub lowercase: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            max_len: 128,
            lowercase: false,
        }
    }
}

/// Tokenizes one or two sentences and lays them out BERT-style.
///
/// Words that do not fit in `max_len` are dropped whole from the right. For a
/// pair, words are removed from whichever sentence is currently longer in
/// subwords (the second one on ties). It is an error only if a sentence would
/// lose every word.
pub fn build_alignment(
    sentences: &[&DependencySentence],
    vocab: &Vocabulary,
    opts: AlignOptions,
) -> Result<SubwordAlignment, AlignError> {
    if opts.max_len < 3 {
        return Err(AlignError::MaxLenTooSmall(opts.max_len));
    }
    if !(1..=2).contains(&sentences.len()) {
        return Err(AlignError::SentenceCount(sentences.len()));
    }
    let room = opts.max_len - 1 - sentences.len();
    let pieces: Vec<Vec<Vec<String>>> = sentences
        .iter()
        .map(|s| {
            s.words
                .iter()
                .map(|w| wordpiece_tokenize(&normalize(w, opts.lowercase), vocab))
                .collect()
        })
        .collect();
    let mut kept: Vec<usize> = pieces.iter().map(Vec::len).collect();
    let mut lens: Vec<usize> = pieces
        .iter()
        .map(|sent| sent.iter().map(Vec::len).sum())
        .collect();
    while lens.iter().sum::<usize>() > room {
        let s = if lens.len() == 2 && lens[0] > lens[1] {
            0
        } else {
            lens.len() - 1
        };
        kept[s] -= 1;
        lens[s] -= pieces[s][kept[s]].len();
    }
    for (s, sent) in pieces.iter().enumerate() {
        if kept[s] == 0 && !sent.is_empty() {
            return Err(AlignError::WordTooLong {
                word: sentences[s].words[0].clone(),
                pieces: sent[0].len(),
                room,
            });
        }
    }

    let mut layout = Layout::new(vocab);
    layout.push_special(CLS, Slot::Cls);
    let mut word_spans = Vec::with_capacity(sentences.len());
    let mut sep_pos = Vec::with_capacity(sentences.len());
    for (s, sent) in pieces.iter().enumerate() {
        let mut spans = Vec::with_capacity(kept[s]);
        for (w, word_pieces) in sent.iter().take(kept[s]).enumerate() {
            let start = layout.len();
            for piece in word_pieces {
                layout.push(piece, Slot::Word { sentence: s, word: w });
            }
            spans.push(start..layout.len());
        }
        word_spans.push(spans);
        sep_pos.push(layout.len());
        layout.push_special(SEP, Slot::Sep);
    }
    let pad_from = layout.len();
    Ok(SubwordAlignment {
        tokens: layout.tokens,
        ids: layout.ids,
        slots: layout.slots,
        word_spans,
        sep_pos,
        pad_from,
    })
}

struct Layout<'v> {
    vocab: &'v Vocabulary,
    tokens: Vec<String>,
    ids: Vec<u32>,
    slots: Vec<Slot>,
}

impl<'v> Layout<'v> {
    fn new(vocab: &'v Vocabulary) -> Self {
        Self {
            vocab,
            tokens: Vec::new(),
            ids: Vec::new(),
            slots: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.slots.len()
    }

    fn push_special(&mut self, token: &str, slot: Slot) {
        self.ids.push(self.vocab.special_id(token));
        self.tokens.push(token.to_string());
        self.slots.push(slot);
    }

    fn push(&mut self, piece: &str, slot: Slot) {
        let id = self
            .vocab
            .id(piece)
            .unwrap_or_else(|| self.vocab.special_id(UNK));
        self.ids.push(id);
        self.tokens.push(piece.to_string());
        self.slots.push(slot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        let mut entries: Vec<String> = [PAD, UNK, CLS, SEP].map(String::from).to_vec();
        entries.extend(words.iter().map(|w| w.to_string()));
        Vocabulary::new(entries).unwrap()
    }

    fn sentence(words: &[&str]) -> DependencySentence {
        let edges: Vec<_> = (1..words.len()).map(|i| (i - 1, i)).collect();
        DependencySentence::new("s", words.iter().map(|w| w.to_string()).collect(), edges).unwrap()
    }

    #[test]
    fn vocabulary_requires_specials() {
        let err = Vocabulary::new(vec!["[CLS]".into(), "[SEP]".into(), "[PAD]".into()]);
        assert_eq!(err, Err(AlignError::MissingSpecial(UNK)));
        let err = Vocabulary::from_text("[PAD]\n[UNK]\n[CLS]\n[SEP]\na\na\n");
        assert_eq!(err, Err(AlignError::DuplicateEntry("a".into())));
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = vocab(&["play", "##ing"]);
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("##ing"), Some(5));
        assert_eq!(back.token(4), Some("play"));
    }

    #[test]
    fn wordpiece_cases() {
        let v = vocab(&["play", "##ing", "##in", "##g", "runs"]);
        assert_eq!(wordpiece_tokenize("runs", &v), vec!["runs"]);
        assert_eq!(wordpiece_tokenize("playing", &v), vec!["play", "##ing"]);
        assert_eq!(wordpiece_tokenize("qqq", &v), vec![UNK]);
        // a matched prefix does not save a word with an unmatched tail
        assert_eq!(wordpiece_tokenize("playx", &v), vec![UNK]);
    }

    #[test]
    fn single_sentence_layout() {
        let v = vocab(&["a", "b"]);
        let s = sentence(&["a", "b"]);
        let a = build_alignment(&[&s], &v, AlignOptions::default()).unwrap();
        assert_eq!(a.seq_len(), 4);
        assert_eq!(a.word_spans, vec![vec![1..2, 2..3]]);
        assert_eq!(a.sep_pos, vec![3]);
        assert_eq!(a.pad_from, 4);
        assert_eq!(a.tokens, vec![CLS, "a", "b", SEP]);
    }

    #[test]
    fn multi_piece_word_span() {
        let v = vocab(&["play", "##ing"]);
        let s = sentence(&["playing"]);
        let a = build_alignment(&[&s], &v, AlignOptions::default()).unwrap();
        assert_eq!(a.word_spans[0], vec![1..3]);
        assert_eq!(a.seq_len(), 4);
    }

    #[test]
    fn pair_layout() {
        let v = vocab(&["a", "b"]);
        let (s1, s2) = (sentence(&["a"]), sentence(&["b"]));
        let a = build_alignment(&[&s1, &s2], &v, AlignOptions::default()).unwrap();
        assert_eq!(a.seq_len(), 5);
        assert_eq!(a.sentence_of(1), Some(0));
        assert_eq!(a.sentence_of(3), Some(1));
        assert_eq!(a.sentence_of(2), None);
        assert_eq!(a.sep_pos, vec![2, 4]);
        assert_eq!(a.segment_ids(), vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn truncation_drops_whole_words() {
        let v = vocab(&["play", "##ing", "a"]);
        let s = sentence(&["a", "playing", "a"]);
        let opts = AlignOptions {
            max_len: 5,
            lowercase: false,
        };
        let a = build_alignment(&[&s], &v, opts).unwrap();
        // room for 3 subwords: "a" + "play ##ing" fits, the last "a" does not
        assert_eq!(a.word_spans[0], vec![1..2, 2..4]);
        let opts = AlignOptions {
            max_len: 4,
            lowercase: false,
        };
        let a = build_alignment(&[&s], &v, opts).unwrap();
        assert_eq!(a.word_spans[0], vec![1..2]);
        assert_eq!(a.seq_len(), 3);
    }

    #[test]
    fn pair_truncation_is_longest_first() {
        let v = vocab(&["a"]);
        let s1 = sentence(&["a", "a", "a", "a"]);
        let s2 = sentence(&["a", "a"]);
        let opts = AlignOptions {
            max_len: 7,
            lowercase: false,
        };
        let a = build_alignment(&[&s1, &s2], &v, opts).unwrap();
        assert_eq!(a.word_count(0), 2);
        assert_eq!(a.word_count(1), 2);
    }

    #[test]
    fn alignment_errors() {
        let v = vocab(&["play", "##ing"]);
        let s = sentence(&["playing"]);
        let opts = |max_len| AlignOptions {
            max_len,
            lowercase: false,
        };
        assert_eq!(
            build_alignment(&[&s], &v, opts(2)),
            Err(AlignError::MaxLenTooSmall(2))
        );
        assert!(matches!(
            build_alignment(&[&s], &v, opts(3)),
            Err(AlignError::WordTooLong { pieces: 2, room: 1, .. })
        ));
        assert_eq!(
            build_alignment(&[], &v, opts(10)),
            Err(AlignError::SentenceCount(0))
        );
    }

    #[test]
    fn lowercase_flag() {
        let v = vocab(&["word"]);
        let s = sentence(&["Word"]);
        let cased = build_alignment(&[&s], &v, AlignOptions::default()).unwrap();
        assert_eq!(cased.tokens[1], UNK);
        let opts = AlignOptions {
            lowercase: true,
            ..AlignOptions::default()
        };
        let lower = build_alignment(&[&s], &v, opts).unwrap();
        assert_eq!(lower.tokens[1], "word");
    }

    #[test]
    fn padding_appends_pad_slots() {
        let v = vocab(&["a"]);
        let s = sentence(&["a"]);
        let a = build_alignment(&[&s], &v, AlignOptions::default())
            .unwrap()
            .padded(6, &v)
            .unwrap();
        assert_eq!(a.seq_len(), 6);
        assert_eq!(a.pad_from, 3);
        assert!(a.is_pad(5));
        assert_eq!(a.slots[4], Slot::Pad);
    }

    #[test]
    fn whole_word_vocabulary() {
        let s = sentence(&["The", "cat", "the"]);
        let v = Vocabulary::whole_words([&s], true);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("the"), Some(4));
    }
}
