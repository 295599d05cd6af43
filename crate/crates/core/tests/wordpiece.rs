use std::collections::BTreeSet;

use proptest::prelude::*;
use sla_core::subword::{wordpiece_tokenize, Slot, CLS, PAD, SEP, UNK};
use sla_core::{build_alignment, AlignError, AlignOptions, DependencySentence, Vocabulary};

fn vocab(extra: &BTreeSet<String>) -> Vocabulary {
    let mut entries: Vec<String> = [PAD, UNK, CLS, SEP].map(String::from).to_vec();
    for c in ["a", "b", "c"] {
        entries.push(c.to_string());
        entries.push(format!("##{c}"));
    }
    entries.extend(extra.iter().filter(|e| !entries.contains(e)).cloned().collect::<Vec<_>>());
    Vocabulary::new(entries).unwrap()
}

/// Every segmentation of `word` into vocabulary pieces.
fn all_segmentations(word: &str, v: &Vocabulary) -> Vec<Vec<String>> {
    fn go(rest: &str, first: bool, v: &Vocabulary, acc: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
        if rest.is_empty() {
            out.push(acc.clone());
            return;
        }
        for end in 1..=rest.len() {
            let piece = if first { rest[..end].to_string() } else { format!("##{}", &rest[..end]) };
            if v.contains(&piece) {
                acc.push(piece);
                go(&rest[end..], false, v, acc, out);
                acc.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(word, true, v, &mut Vec::new(), &mut out);
    out
}

fn piece_lengths(pieces: &[String]) -> Vec<usize> {
    pieces.iter().map(|p| p.trim_start_matches("##").len()).collect()
}

#[test]
fn playing_splits_into_play_ing() {
    let mut extra = BTreeSet::new();
    extra.extend(["play", "##ing", "##in", "p", "##l", "##a", "##y", "##i", "##n", "##g"].map(String::from));
    let v = vocab(&extra);
    assert_eq!(wordpiece_tokenize("playing", &v), ["play", "##ing"]);
    let segs = all_segmentations("playing", &v);
    assert!(segs.len() > 1);
    let best = segs.iter().max_by_key(|s| piece_lengths(s)).unwrap();
    assert_eq!(best, &["play", "##ing"]);
}

proptest! {
    #[test]
    fn greedy_equals_longest_first_exhaustive(
        extra in prop::collection::btree_set("(##)?[abc]{2,4}", 0..12),
        word in "[abc]{1,8}",
    ) {
        let v = vocab(&extra);
        let greedy = wordpiece_tokenize(&word, &v);
        let best = all_segmentations(&word, &v)
            .into_iter()
            .max_by_key(|s| piece_lengths(s))
            .unwrap();
        prop_assert_eq!(greedy, best);
    }

    #[test]
    fn out_of_alphabet_is_unk(word in "[xyz]{1,5}") {
        prop_assert_eq!(wordpiece_tokenize(&word, &vocab(&BTreeSet::new())), vec![UNK.to_string()]);
    }

    #[test]
    fn alignment_classifies_every_position_once(
        words1 in prop::collection::vec("[abc]{1,4}", 1..8),
        words2 in prop::collection::vec("[abc]{1,4}", 0..6),
        max_len in 6usize..40,
    ) {
        let v = vocab(&BTreeSet::from(["ab".to_string(), "##bc".to_string()]));
        let s1 = chain("s1", &words1);
        let s2 = chain("s2", &words2);
        let sents: Vec<&DependencySentence> = if words2.is_empty() { vec![&s1] } else { vec![&s1, &s2] };
        let a = match build_alignment(&sents, &v, AlignOptions { max_len, lowercase: false }) {
            Ok(a) => a,
            Err(AlignError::WordTooLong { room, .. }) => {
                prop_assert_eq!(room, max_len - 1 - sents.len());
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(a.seq_len() <= max_len);
        let span_total: usize = a.word_spans.iter().flatten().map(|r| r.len()).sum();
        prop_assert_eq!(span_total + 1 + a.sep_pos.len() + (a.seq_len() - a.pad_from), a.seq_len());
        for (s, spans) in a.word_spans.iter().enumerate() {
            for (w, r) in spans.iter().enumerate() {
                prop_assert!(!r.is_empty());
                for p in r.clone() {
                    prop_assert_eq!(a.slots[p], Slot::Word { sentence: s, word: w });
                }
            }
            for pair in spans.windows(2) {
                prop_assert_eq!(pair[0].end, pair[1].start);
            }
        }
        prop_assert_eq!(a.slots[0], Slot::Cls);
        for &p in &a.sep_pos {
            prop_assert_eq!(a.slots[p], Slot::Sep);
        }
    }

    #[test]
    fn truncation_is_prefix_stable(
        words in prop::collection::vec("[abc]{1,4}", 1..10),
        max_len in 3usize..30,
    ) {
        let v = vocab(&BTreeSet::new());
        let s = chain("s", &words);
        let opts = AlignOptions { max_len, lowercase: false };
        let Ok(a) = build_alignment(&[&s], &v, opts) else {
            // only a first word too long for max_len may fail
            prop_assert!(words[0].len() > max_len - 2);
            return Ok(());
        };
        let kept = s.prefix(a.word_count(0));
        prop_assert_eq!(build_alignment(&[&kept], &v, opts).unwrap(), a);
    }
}

fn chain(id: &str, words: &[String]) -> DependencySentence {
    let edges = (1..words.len()).map(|i| (i - 1, i));
    DependencySentence::new(id, words.to_vec(), edges).unwrap()
}
