//! Seeded "syntactic neighbourhood" token-labeling data.
//!
//! Each sentence is a random dependency tree laid out in a random linear
//! order (projective or shuffled). One word is the marker; a word is labeled
//! 1 iff the marker lies within distance `radius` of it, measured in the tree.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Label, LabeledExample};
use crate::mask::neighbor_min_distance;
use crate::rng::{stream, Stream};
use crate::subword::{Vocabulary, CLS, PAD, SEP, UNK};
use crate::syntax::{all_pairs_distance, DependencySentence};

pub const MARKER: &str = "mark";
const STEMS: [&str; 16] = [
    "ba", "de", "fi", "go", "hu", "ka", "le", "mo", "nu", "pe", "ri", "so", "tu", "va", "we", "zo",
];
const SUFFIXES: [&str; 2] = ["s", "n"];

/// How tree nodes are placed into word order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordOrder {
    /// Each dependent goes left or right of its head at random; arcs never cross.
    Projective,
    /// Uniformly random permutation.
    Shuffled,
}

/// Which distance decides the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelDistance {
    /// Tree distance between the word and the marker.
    Tree,
    /// Minimum tree distance from the word or its linear neighbours to the marker.
    NeighborMin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub train: usize,
    pub dev: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Label radius in tree edges.
    pub radius: u32,
    /// Each new node attaches to one of the previous `reach` nodes; small
    /// values give deep trees.
    pub reach: usize,
    pub order: WordOrder,
    pub label_distance: LabelDistance,
    /// Probability that a filler word carries a suffix piece.
    pub suffix_rate: f64,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            train: 2000,
            dev: 500,
            min_words: 14,
            max_words: 22,
            radius: 3,
            reach: 2,
            order: WordOrder::Projective,
            label_distance: LabelDistance::Tree,
            suffix_rate: 0.2,
            seed: 0,
        }
    }
}

pub struct SynthDataset {
    pub vocab: Vocabulary,
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
}

/// Vocabulary covering every generated word: specials, marker, stems and
/// `##` suffix pieces.
pub fn vocabulary() -> Vocabulary {
    let mut entries: Vec<String> = [PAD, UNK, CLS, SEP, MARKER].map(String::from).to_vec();
    entries.extend(STEMS.iter().map(|s| s.to_string()));
    entries.extend(SUFFIXES.iter().map(|s| format!("##{s}")));
    Vocabulary::new(entries).expect("static vocabulary is well formed")
}

/// Edges of the tree encoded by a Prüfer sequence over `code.len() + 2` nodes.
pub fn prufer_decode(code: &[usize]) -> Vec<(usize, usize)> {
    let n = code.len() + 2;
    let mut degree = vec![1usize; n];
    for &x in code {
        degree[x] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &x in code {
        let leaf = (0..n).find(|&i| degree[i] == 1).expect("a leaf always exists");
        edges.push((leaf, x));
        degree[leaf] -= 1;
        degree[x] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

/// Uniform random labeled tree on `n` nodes.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<(usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    let code: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    prufer_decode(&code)
}

fn projective_order<R: Rng + ?Sized>(node: usize, children: &[Vec<usize>], rng: &mut R, out: &mut Vec<usize>) {
    let (left, right): (Vec<usize>, Vec<usize>) = children[node].iter().partition(|_| rng.random_bool(0.5));
    for c in left {
        projective_order(c, children, rng, out);
    }
    out.push(node);
    for c in right {
        projective_order(c, children, rng, out);
    }
}

/// Tree grown node by node, each attaching to one of the `reach` most recent
/// nodes, then laid out in `order`. Returns edges over word positions.
fn deep_tree<R: Rng + ?Sized>(rng: &mut R, n: usize, reach: usize, order: WordOrder) -> Vec<(usize, usize)> {
    let mut children = vec![Vec::new(); n];
    let edges: Vec<(usize, usize)> = (1..n)
        .map(|t| {
            let head = rng.random_range(t.saturating_sub(reach.max(1))..t);
            children[head].push(t);
            (head, t)
        })
        .collect();
    let layout: Vec<usize> = match order {
        WordOrder::Projective => {
            let mut out = Vec::with_capacity(n);
            projective_order(0, &children, rng, &mut out);
            out
        }
        WordOrder::Shuffled => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            perm
        }
    };
    let mut position = vec![0; n];
    for (p, &node) in layout.iter().enumerate() {
        position[node] = p;
    }
    edges.into_iter().map(|(a, b)| (position[a], position[b])).collect()
}

fn example<R: Rng + ?Sized>(rng: &mut R, opts: &SynthOptions, id: usize) -> LabeledExample {
    let n = rng.random_range(opts.min_words..=opts.max_words);
    let edges = deep_tree(rng, n, opts.reach, opts.order);
    let marker = rng.random_range(0..n);
    let words = (0..n)
        .map(|i| {
            if i == marker {
                return MARKER.to_string();
            }
            let stem = STEMS[rng.random_range(0..STEMS.len())];
            if rng.random_bool(opts.suffix_rate) {
                format!("{stem}{}", SUFFIXES[rng.random_range(0..SUFFIXES.len())])
            } else {
                stem.to_string()
            }
        })
        .collect();
    let sentence = DependencySentence::new(id.to_string(), words, edges).expect("generated tree is valid");
    let dis = all_pairs_distance(&sentence);
    let labels = match opts.label_distance {
        LabelDistance::Tree => (0..n).map(|i| usize::from(dis.get(i, marker) <= opts.radius)).collect(),
        LabelDistance::NeighborMin => {
            let d = neighbor_min_distance(&dis);
            (0..n).map(|i| usize::from(d.get(i, marker) <= opts.radius)).collect()
        }
    };
    LabeledExample {
        sentences: vec![sentence],
        label: Label::Tokens(labels),
    }
}

pub fn generate(opts: &SynthOptions) -> SynthDataset {
    assert!(opts.min_words >= 1 && opts.min_words <= opts.max_words, "bad word range");
    let mut rng = stream(opts.seed, Stream::Synth);
    let train = (0..opts.train).map(|i| example(&mut rng, opts, i + 1)).collect();
    let dev = (0..opts.dev)
        .map(|i| example(&mut rng, opts, opts.train + i + 1))
        .collect();
    SynthDataset {
        vocab: vocabulary(),
        train,
        dev,
    }
}
