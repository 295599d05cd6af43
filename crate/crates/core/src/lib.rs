//! Syntax-aware local attention.
//!
//! Dependency trees are read from CoNLL-U ([`syntax`]), tokenized into
//! WordPiece subwords ([`subword`]) and turned into additive attention masks
//! that open query `i` to key `j` when the neighbour-min tree distance
//! `D(i, j)` is at most `m` ([`mask`]). Each encoder layer mixes a masked
//! local softmax with the usual global one through a per-token sigmoid gate
//! ([`attention`]). [`model`] stacks those layers into a small trainable
//! encoder on top of a reverse-mode tape ([`autograd`]).

pub mod attention;
pub mod autograd;
pub mod mask;
pub mod model;
pub mod rng;
pub mod subword;
pub mod syntax;
pub mod tensor;

pub use attention::{AttentionTrace, LayerParams, LayerTrace};
pub use mask::{
    build_pair_mask, build_sla_mask, build_syntax_mask, build_window_mask, neighbor_min_distance, AdditiveMask,
    MaskError, MaskMode, MaskSidecar, NeighborDistance, NEG,
};
pub use model::{AttentionMode, ModelError, SlaConfig, SlaModel, Task};
pub use subword::{build_alignment, AlignError, AlignOptions, SubwordAlignment, Vocabulary};
pub use syntax::{all_pairs_distance, parse_conllu, render_conllu, DependencySentence, DistanceMatrix, ParseError};
pub use tensor::{Matrix, TensorError};
