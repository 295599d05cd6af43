//! Dependency-parse ingestion and tree distances.
//!
//! Sentences are read from CoNLL-U. Only the FORM and HEAD columns matter:
//! every token with a non-zero HEAD contributes one undirected, unlabeled edge.
//! Parses with several roots are kept as forests; pairs in different
//! components get [`UNREACHABLE`] distance.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

/// Distance between two tree nodes, in edges.
pub type Distance = u32;

/// Sentinel for node pairs in different components of a forest. Compares
/// greater than every finite distance, so `d <= m` never admits it.
pub const UNREACHABLE: Distance = Distance::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: expected 10 tab-separated columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: malformed ID {id:?}")]
    BadId { line: usize, id: String },
    #[error("line {line}: expected token ID {expected}, found {found}")]
    NonMonotoneId {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: HEAD {head:?} is not an integer")]
    BadHead { line: usize, head: String },
    #[error("line {line}: HEAD {head} is out of range for a sentence of {len} tokens")]
    HeadOutOfRange { line: usize, head: usize, len: usize },
    #[error("line {line}: token {token} is its own head")]
    SelfHead { line: usize, token: usize },
}

/// Words of one sentence plus its undirected dependency edges.
///
/// Positions are 1-based in the CoNLL-U file and 0-based here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencySentence {
    pub sentence_id: String,
    pub words: Vec<String>,
    edges: BTreeSet<(usize, usize)>,
}

impl DependencySentence {
    /// Builds a sentence from 0-based edges. Edges are normalised to
    /// `(min, max)`; self-loops, duplicates and out-of-range endpoints are
    /// rejected with `None`.
    pub fn new(
        sentence_id: impl Into<String>,
        words: Vec<String>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Option<Self> {
        let n = words.len();
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b || a >= n || b >= n {
                return None;
            }
            if !set.insert((a.min(b), a.max(b))) {
                return None;
            }
        }
        if n > 0 && set.len() > n - 1 {
            return None;
        }
        Some(Self {
            sentence_id: sentence_id.into(),
            words,
            edges: set,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Undirected edges as 0-based `(low, high)` pairs, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Adjacency lists, neighbours in ascending order.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Number of connected components; 1 for a well-formed tree.
    pub fn component_count(&self) -> usize {
        let adj = self.adjacency();
        let mut seen = vec![false; self.len()];
        let mut count = 0;
        for start in 0..self.len() {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        count
    }

    /// True when the edges span a single tree over all words.
    pub fn is_tree(&self) -> bool {
        !self.is_empty() && self.edges.len() == self.len() - 1 && self.component_count() == 1
    }

    /// Keeps the first `n` words and the edges among them.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            sentence_id: self.sentence_id.clone(),
            words: self.words[..n].to_vec(),
            edges: self
                .edges
                .iter()
                .copied()
                .filter(|&(_, b)| b < n)
                .collect(),
        }
    }
}

/// All-pairs tree distances for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<Distance>,
}

impl DistanceMatrix {
    pub fn from_rows(rows: Vec<Vec<Distance>>) -> Option<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return None;
        }
        Some(Self {
            n,
            d: rows.into_iter().flatten().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> Distance {
        self.d[i * self.n + j]
    }

    /// Largest finite distance.
    pub fn diameter(&self) -> Distance {
        self.d
            .iter()
            .copied()
            .filter(|&x| x != UNREACHABLE)
            .max()
            .unwrap_or(0)
    }
}

/// Shortest-path lengths between every pair of words, by one breadth-first
/// search per source node.
pub fn all_pairs_distance(s: &DependencySentence) -> DistanceMatrix {
    let n = s.len();
    let adj = s.adjacency();
    let mut d = vec![UNREACHABLE; n * n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        let row = &mut d[src * n..(src + 1) * n];
        row[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let next = row[u] + 1;
            for &v in &adj[u] {
                if row[v] == UNREACHABLE {
                    row[v] = next;
                    queue.push_back(v);
                }
            }
        }
    }
    DistanceMatrix { n, d }
}

/// Reads every sentence of a CoNLL-U document.
///
/// Multiword ranges (`3-4`) and empty nodes (`5.1`) are skipped. A sentence id
/// comes from a `# sent_id = ...` comment when present, otherwise from the
/// sentence's ordinal in the file.
pub fn parse_conllu(text: &str) -> Result<Vec<DependencySentence>, ParseError> {
    let mut out = Vec::new();
    let mut block = Block::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            block.finish(&mut out)?;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(id) = comment.trim().strip_prefix("sent_id") {
                let id = id.trim_start().trim_start_matches('=').trim();
                block.sent_id = Some(id.to_string());
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(ParseError::ColumnCount {
                line: line_no,
                found: cols.len(),
            });
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let id: usize = id.parse().map_err(|_| ParseError::BadId {
            line: line_no,
            id: id.to_string(),
        })?;
        let expected = block.tokens.len() + 1;
        if id != expected {
            return Err(ParseError::NonMonotoneId {
                line: line_no,
                expected,
                found: id,
            });
        }
        let head: usize = cols[6].parse().map_err(|_| ParseError::BadHead {
            line: line_no,
            head: cols[6].to_string(),
        })?;
        if head == id {
            return Err(ParseError::SelfHead {
                line: line_no,
                token: id,
            });
        }
        block.tokens.push(RawToken {
            form: cols[1].to_string(),
            head,
            line: line_no,
        });
    }
    block.finish(&mut out)?;
    Ok(out)
}

struct RawToken {
    form: String,
    head: usize,
    line: usize,
}

#[derive(Default)]
struct Block {
    tokens: Vec<RawToken>,
    sent_id: Option<String>,
}

impl Block {
    fn finish(&mut self, out: &mut Vec<DependencySentence>) -> Result<(), ParseError> {
        let tokens = std::mem::take(&mut self.tokens);
        let sent_id = self.sent_id.take();
        if tokens.is_empty() {
            return Ok(());
        }
        let n = tokens.len();
        let mut edges = BTreeSet::new();
        let mut components = DisjointSets::new(n);
        let mut dropped = 0;
        for (i, tok) in tokens.iter().enumerate() {
            if tok.head > n {
                return Err(ParseError::HeadOutOfRange {
                    line: tok.line,
                    head: tok.head,
                    len: n,
                });
            }
            if tok.head > 0 {
                let h = tok.head - 1;
                // An edge joining an already-connected pair would close a cycle.
                if components.union(i, h) {
                    edges.insert((i.min(h), i.max(h)));
                } else {
                    dropped += 1;
                }
            }
        }
        let sentence_id = sent_id.unwrap_or_else(|| (out.len() + 1).to_string());
        if dropped > 0 {
            log::warn!("sentence {sentence_id}: HEAD column is cyclic, dropped {dropped} edge(s)");
        }
        out.push(DependencySentence {
            sentence_id,
            words: tokens.into_iter().map(|t| t.form).collect(),
            edges,
        });
        Ok(())
    }
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Merges the sets of `a` and `b`; false when they were already one set.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

/// Writes sentences back as minimal CoNLL-U. Each component is rooted at its
/// lowest-numbered word; unused columns are `_`.
pub fn render_conllu(sentences: &[DependencySentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        let _ = writeln!(out, "# sent_id = {}", s.sentence_id);
        let heads = orient(s);
        for (i, word) in s.words.iter().enumerate() {
            let head = heads[i].map_or(0, |h| h + 1);
            let _ = writeln!(out, "{}\t{}\t_\t_\t_\t_\t{}\t_\t_\t_", i + 1, word, head);
        }
        out.push('\n');
    }
    out
}

/// Parent of each node when every component is rooted at its smallest index.
fn orient(s: &DependencySentence) -> Vec<Option<usize>> {
    let adj = s.adjacency();
    let mut parent = vec![None; s.len()];
    let mut seen = vec![false; s.len()];
    for root in 0..s.len() {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
    }
    parent
}
