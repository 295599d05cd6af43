//! Additive attention masks over the subword layout.
//!
//! Entry `[q][k]` of a mask is added to the logit of query `q` attending to
//! key `k`: `0.0` keeps the pair, [`NEG`] suppresses it. Masks are decided at
//! word level and copied across each word's subword span. `[CLS]` and `[SEP]`
//! rows and columns are always open, padding columns are always closed.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::subword::{Slot, SubwordAlignment};
use crate::syntax::{Distance, DistanceMatrix, UNREACHABLE};

/// Finite stand-in for negative infinity.
pub const NEG: f64 = -1e9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("sentence {sentence} has {expected} aligned words but its distance matrix covers {found}")]
    SizeMismatch {
        sentence: usize,
        expected: usize,
        found: usize,
    },
    #[error("pair mask needs a two-sentence alignment, got {0} sentence(s)")]
    NotAPair(usize),
    #[error("expected {expected} distance matrices, got {found}")]
    DistanceCount { expected: usize, found: usize },
    #[error("malformed allow-bit CSV: {0}")]
    Csv(String),
}

/// Word-level pairs `(i, j)` with `D(i, j)` the smallest tree distance from
/// `{i-1, i, i+1}` to `j`. Not symmetric in general.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborDistance {
    n: usize,
    d: Vec<Distance>,
}

impl NeighborDistance {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> Distance {
        self.d[i * self.n + j]
    }

    /// Swaps the query and key roles; used to compare the two readings of
    /// which side of the pair carries the neighbourhood.
    pub fn transposed(&self) -> Self {
        let n = self.n;
        let mut d = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[j * n + i] = self.d[i * n + j];
            }
        }
        Self { n, d }
    }
}

pub fn neighbor_min_distance(dis: &DistanceMatrix) -> NeighborDistance {
    let n = dis.len();
    let mut d = vec![UNREACHABLE; n * n];
    for i in 0..n {
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(n.saturating_sub(1));
        for j in 0..n {
            d[i * n + j] = (lo..=hi).map(|k| dis.get(k, j)).min().unwrap_or(UNREACHABLE);
        }
    }
    NeighborDistance { n, d }
}

/// Square `{0, NEG}` mask, row = query, column = key.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveMask {
    len: usize,
    vals: Vec<f64>,
}

impl AdditiveMask {
    /// Mask from explicit allow bits, without any special-token rules.
    pub fn from_allowed(len: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let mut vals = vec![NEG; len * len];
        for q in 0..len {
            for k in 0..len {
                if allowed(q, k) {
                    vals[q * len + k] = 0.0;
                }
            }
        }
        Self { len, vals }
    }

    /// Every pair open.
    pub fn open(len: usize) -> Self {
        Self {
            len,
            vals: vec![0.0; len * len],
        }
    }

    /// The global-attention mask: only padding columns are closed.
    pub fn padding_only(a: &SubwordAlignment) -> Self {
        Self::from_allowed(a.seq_len(), |_, k| !a.is_pad(k))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, q: usize, k: usize) -> f64 {
        self.vals[q * self.len + k]
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.get(q, k) == 0.0
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn allowed_count(&self) -> usize {
        self.vals.iter().filter(|&&v| v == 0.0).count()
    }

    /// Allow bits as CSV, one row per query, `1` = allowed, no header.
    pub fn to_allow_csv(&self) -> String {
        let mut out = String::with_capacity(self.len * self.len * 2);
        for q in 0..self.len {
            for k in 0..self.len {
                if k > 0 {
                    out.push(',');
                }
                out.push(if self.is_allowed(q, k) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_allow_csv(text: &str) -> Result<Self, MaskError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut rows: Vec<Vec<bool>> = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| MaskError::Csv(e.to_string()))?;
            let row = record
                .iter()
                .map(|f| match f.trim() {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    other => Err(MaskError::Csv(format!("unexpected cell {other:?}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        let len = rows.len();
        if rows.iter().any(|r| r.len() != len) {
            return Err(MaskError::Csv("mask is not square".into()));
        }
        Ok(Self::from_allowed(len, |q, k| rows[q][k]))
    }
}

impl fmt::Display for AdditiveMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for q in 0..self.len {
            for k in 0..self.len {
                f.write_str(if self.is_allowed(q, k) { "." } else { "x" })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Which builder produced a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Sla,
    Window,
    Pair,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Sla => "sla",
            MaskMode::Window => "window",
            MaskMode::Pair => "pair",
        })
    }
}

/// JSON sidecar written next to an exported mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSidecar {
    #[serde(rename = "L")]
    pub len: usize,
    pub mode: MaskMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    pub sentence_id: String,
}

/// Expands a word-level decision to the full layout with the special-token
/// and padding rules.
fn assemble(
    a: &SubwordAlignment,
    allow: impl Fn((usize, usize), (usize, usize)) -> bool,
) -> AdditiveMask {
    let slots = &a.slots;
    AdditiveMask::from_allowed(a.seq_len(), |q, k| match (slots[q], slots[k]) {
        (_, Slot::Pad) => false,
        (Slot::Pad, _) => true,
        (Slot::Cls | Slot::Sep, _) | (_, Slot::Cls | Slot::Sep) => true,
        (
            Slot::Word {
                sentence: sq,
                word: wq,
            },
            Slot::Word {
                sentence: sk,
                word: wk,
            },
        ) => allow((sq, wq), (sk, wk)),
    })
}

fn check_sizes(a: &SubwordAlignment, ds: &[&NeighborDistance]) -> Result<(), MaskError> {
    if ds.len() != a.sentence_count() {
        return Err(MaskError::DistanceCount {
            expected: a.sentence_count(),
            found: ds.len(),
        });
    }
    for (s, d) in ds.iter().enumerate() {
        if d.len() != a.word_count(s) {
            return Err(MaskError::SizeMismatch {
                sentence: s,
                expected: a.word_count(s),
                found: d.len(),
            });
        }
    }
    Ok(())
}

/// Syntax-aware local mask for a single-sentence alignment: word `i` may
/// attend to word `j` iff `D(i, j) <= m`.
pub fn build_sla_mask(
    d: &NeighborDistance,
    m: u32,
    a: &SubwordAlignment,
) -> Result<AdditiveMask, MaskError> {
    check_sizes(a, &[d])?;
    Ok(assemble(a, |(_, i), (_, j)| d.get(i, j) <= m))
}

/// Window baseline: word `i` may attend to word `j` iff `|i - j| <= k`.
/// Across the two sentences of a pair every word pair is open, as in
/// [`build_pair_mask`].
pub fn build_window_mask(a: &SubwordAlignment, k: usize) -> AdditiveMask {
    assemble(a, |(sq, i), (sk, j)| sq != sk || i.abs_diff(j) <= k)
}

/// Sentence-pair mask: each sentence uses its own syntax-aware block and
/// every cross-sentence pair is open.
pub fn build_pair_mask(
    d1: &NeighborDistance,
    d2: &NeighborDistance,
    m: u32,
    a: &SubwordAlignment,
) -> Result<AdditiveMask, MaskError> {
    if a.sentence_count() != 2 {
        return Err(MaskError::NotAPair(a.sentence_count()));
    }
    check_sizes(a, &[d1, d2])?;
    let ds = [d1, d2];
    Ok(assemble(a, |(sq, i), (sk, j)| {
        sq != sk || ds[sq].get(i, j) <= m
    }))
}

/// Syntax-aware mask for either layout: single sentences go through
/// [`build_sla_mask`], pairs through [`build_pair_mask`].
pub fn build_syntax_mask(
    ds: &[NeighborDistance],
    m: u32,
    a: &SubwordAlignment,
) -> Result<AdditiveMask, MaskError> {
    match ds {
        [d] => build_sla_mask(d, m, a),
        [d1, d2] => build_pair_mask(d1, d2, m, a),
        _ => Err(MaskError::DistanceCount {
            expected: a.sentence_count(),
            found: ds.len(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::{build_alignment, AlignOptions, Vocabulary};
    use crate::syntax::{all_pairs_distance, DependencySentence};

    fn vocab(words: &[&str]) -> Vocabulary {
        let mut entries: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]
            .map(String::from)
            .to_vec();
        entries.extend(words.iter().map(|w| w.to_string()));
        Vocabulary::new(entries).unwrap()
    }

    fn tree(words: &[&str], edges: &[(usize, usize)]) -> DependencySentence {
        DependencySentence::new(
            "t",
            words.iter().map(|w| w.to_string()).collect(),
            edges.iter().copied(),
        )
        .unwrap()
    }

    #[test]
    fn neighbor_min_chain_and_star() {
        let chain = tree(&["a", "b", "c"], &[(0, 1), (1, 2)]);
        let d = neighbor_min_distance(&all_pairs_distance(&chain));
        assert_eq!(d.get(0, 2), 1);
        for i in 0..3 {
            assert_eq!(d.get(i, i), 0);
        }
        let star = tree(&["a", "b", "c"], &[(0, 1), (1, 2)]);
        let d = neighbor_min_distance(&all_pairs_distance(&star));
        assert_eq!(d.get(0, 2), 1);
        assert_eq!(d.get(2, 0), 1);
    }

    fn prufer_tree(seq: &[usize]) -> Vec<(usize, usize)> {
        let n = seq.len() + 2;
        let mut degree = vec![1; n];
        for &x in seq {
            degree[x] += 1;
        }
        let mut edges = Vec::new();
        for &x in seq {
            let leaf = (0..n).find(|&i| degree[i] == 1).unwrap();
            edges.push((leaf, x));
            degree[leaf] -= 1;
            degree[x] -= 1;
        }
        let rest: Vec<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
        edges.push((rest[0], rest[1]));
        edges
    }

    #[test]
    fn neighbor_min_can_be_asymmetric() {
        let words = ["a"; 5];
        let mut asymmetric = 0;
        for code in 0..125 {
            let seq = [code % 5, (code / 5) % 5, code / 25];
            let t = tree(&words, &prufer_tree(&seq));
            let dis = all_pairs_distance(&t);
            let d = neighbor_min_distance(&dis);
            for i in 0..5 {
                for j in 0..5 {
                    assert!(d.get(i, j) <= dis.get(i, j));
                    if d.get(i, j) != d.get(j, i) {
                        asymmetric += 1;
                    }
                }
            }
        }
        assert!(asymmetric > 0);
    }

    #[test]
    fn chain_mask_m1_is_fully_open() {
        let v = vocab(&["a", "b", "c"]);
        let s = tree(&["a", "b", "c"], &[(0, 1), (1, 2)]);
        let a = build_alignment(&[&s], &v, AlignOptions::default()).unwrap();
        let d = neighbor_min_distance(&all_pairs_distance(&s));
        let mask = build_sla_mask(&d, 1, &a).unwrap();
        assert_eq!(mask.len(), 5);
        assert_eq!(mask.allowed_count(), 25);
        let mask0 = build_sla_mask(&d, 0, &a).unwrap();
        // word 0 -> word 2 needs D = 1
        assert!(!mask0.is_allowed(1, 3));
        assert!(mask0.is_allowed(1, 2));
        // specials stay open
        assert!(mask0.is_allowed(0, 3) && mask0.is_allowed(3, 0) && mask0.is_allowed(4, 1));
    }

    #[test]
    fn subwords_share_word_value() {
        let v = vocab(&["play", "##ing", "a", "b", "c"]);
        let s = tree(&["a", "playing", "b", "c", "a"], &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let a = build_alignment(&[&s], &v, AlignOptions::default()).unwrap();
        assert_eq!(a.word_spans[0][1], 2..4);
        let d = neighbor_min_distance(&all_pairs_distance(&s));
        let mask = build_sla_mask(&d, 1, &a).unwrap();
        for other in 0..mask.len() {
            assert_eq!(mask.get(2, other), mask.get(3, other));
            assert_eq!(mask.get(other, 2), mask.get(other, 3));
        }
        // "playing" (word 1) reaches word 3 via neighbour word 2, not word 4 (position 6)
        assert!(mask.is_allowed(2, 5));
        assert!(!mask.is_allowed(2, 6));
    }

    #[test]
    fn size_mismatch_is_error() {
        let v = vocab(&["a"]);
        let s = tree(&["a", "a"], &[(0, 1)]);
        let a = build_alignment(&[&s], &v, AlignOptions::default()).unwrap();
        let other = tree(&["a", "a", "a"], &[(0, 1), (1, 2)]);
        let d = neighbor_min_distance(&all_pairs_distance(&other));
        assert_eq!(
            build_sla_mask(&d, 3, &a),
            Err(MaskError::SizeMismatch {
                sentence: 0,
                expected: 2,
                found: 3
            })
        );
    }

    #[test]
    fn window_band() {
        let v = vocab(&["a"]);
        let s = tree(&["a", "a", "a", "a"], &[(0, 1), (1, 2), (2, 3)]);
        let a = build_alignment(&[&s], &v, AlignOptions::default()).unwrap();
        let w = build_window_mask(&a, 1);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(w.is_allowed(i + 1, j + 1), i.abs_diff(j) <= 1);
            }
        }
        assert_eq!(build_window_mask(&a, 3).allowed_count(), 36);
        for k in [3, 4, 5] {
            assert_eq!(build_window_mask(&a, k).len(), 6);
        }
    }

    #[test]
    fn pair_mask_cross_block_open() {
        let v = vocab(&["a"]);
        let s1 = tree(&["a", "a", "a", "a"], &[(0, 1), (1, 2), (2, 3)]);
        let s2 = tree(&["a", "a", "a"], &[(0, 1), (1, 2)]);
        let a = build_alignment(&[&s1, &s2], &v, AlignOptions::default()).unwrap();
        let d1 = neighbor_min_distance(&all_pairs_distance(&s1));
        let d2 = neighbor_min_distance(&all_pairs_distance(&s2));
        let mask = build_pair_mask(&d1, &d2, 0, &a).unwrap();
        for q in 1..5 {
            for k in 6..9 {
                assert!(mask.is_allowed(q, k) && mask.is_allowed(k, q));
            }
        }
        // inside sentence 1 with m = 0: word 0 cannot see word 3
        assert!(!mask.is_allowed(1, 4));

        let single = build_alignment(&[&s1], &v, AlignOptions::default()).unwrap();
        assert_eq!(
            build_pair_mask(&d1, &d2, 0, &single),
            Err(MaskError::NotAPair(1))
        );
    }

    #[test]
    fn padding_rules() {
        let v = vocab(&["a"]);
        let s = tree(&["a", "a", "a"], &[(0, 1), (1, 2)]);
        let a = build_alignment(&[&s], &v, AlignOptions::default())
            .unwrap()
            .padded(8, &v)
            .unwrap();
        let d = neighbor_min_distance(&all_pairs_distance(&s));
        for mask in [
            build_sla_mask(&d, 0, &a).unwrap(),
            build_window_mask(&a, 0),
            AdditiveMask::padding_only(&a),
        ] {
            for q in 0..8 {
                for k in 5..8 {
                    assert_eq!(mask.get(q, k), NEG);
                }
                if q < 5 {
                    assert_eq!(mask.get(q, q), 0.0);
                    assert!(mask.is_allowed(q, 0) && mask.is_allowed(0, q));
                }
            }
        }
    }

    #[test]
    fn allow_csv_round_trip() {
        let mask = AdditiveMask::from_allowed(4, |q, k| (q + k) % 3 != 0);
        let back = AdditiveMask::from_allow_csv(&mask.to_allow_csv()).unwrap();
        assert_eq!(back, mask);
        assert!(AdditiveMask::from_allow_csv("1,0\n1\n").is_err());
        assert!(AdditiveMask::from_allow_csv("1,2\n1,1\n").is_err());
    }

    #[test]
    fn sidecar_json_shape() {
        let side = MaskSidecar {
            len: 5,
            mode: MaskMode::Sla,
            m: Some(3),
            k: None,
            sentence_id: "1".into(),
        };
        let json = serde_json::to_string(&side).unwrap();
        assert_eq!(json, r#"{"L":5,"mode":"sla","m":3,"sentence_id":"1"}"#);
    }
}
