use proptest::prelude::*;
use sla_core::mask::{build_pair_mask, build_sla_mask, build_window_mask, neighbor_min_distance, AdditiveMask, NEG};
use sla_core::model::synth::random_tree;
use sla_core::rng::{stream, Stream};
use sla_core::subword::{Slot, CLS, PAD, SEP, UNK};
use sla_core::{all_pairs_distance, build_alignment, AlignOptions, DependencySentence, SubwordAlignment, Vocabulary};

fn vocab() -> Vocabulary {
    Vocabulary::new([PAD, UNK, CLS, SEP, "a", "##b", "##c"].map(String::from).to_vec()).unwrap()
}

/// Random tree over `n` words, each word one to three subwords long.
fn tree_sentence(n: usize, seed: u64) -> DependencySentence {
    let mut rng = stream(seed, Stream::Inputs);
    let edges = random_tree(&mut rng, n);
    let words = (0..n).map(|i| ["a", "ab", "abc"][(seed as usize + i * 7) % 3].to_string()).collect();
    DependencySentence::new("t", words, edges).unwrap()
}

fn chain(n: usize) -> DependencySentence {
    DependencySentence::new("c", vec!["a".to_string(); n], (1..n).map(|i| (i - 1, i))).unwrap()
}

fn align(sents: &[&DependencySentence], pad: usize) -> SubwordAlignment {
    let a = build_alignment(sents, &vocab(), AlignOptions { max_len: 128, lowercase: false }).unwrap();
    let len = a.seq_len();
    a.padded(len + pad, &vocab()).unwrap()
}

fn sla(s: &DependencySentence, m: u32, a: &SubwordAlignment) -> AdditiveMask {
    build_sla_mask(&neighbor_min_distance(&all_pairs_distance(s)), m, a).unwrap()
}

fn check_structure(mask: &AdditiveMask, a: &SubwordAlignment) -> Result<(), TestCaseError> {
    let len = a.seq_len();
    for q in 0..len {
        for k in 0..len {
            let v = mask.get(q, k);
            prop_assert!(v == 0.0 || v == NEG);
            if a.is_pad(k) {
                prop_assert_eq!(v, NEG);
            } else if a.slots[q].is_special() || a.slots[k].is_special() || a.is_pad(q) {
                prop_assert_eq!(v, 0.0);
            }
        }
        if !a.is_pad(q) {
            prop_assert_eq!(mask.get(q, q), 0.0);
        }
    }
    // constant over every word-pair block
    for p in 0..len {
        for r in 0..len {
            if let (Slot::Word { sentence: s1, word: w1 }, Slot::Word { sentence: s2, word: w2 }) = (a.slots[p], a.slots[r]) {
                let head_p = a.word_spans[s1][w1].start;
                let head_r = a.word_spans[s2][w2].start;
                prop_assert_eq!(mask.get(p, r), mask.get(head_p, head_r));
            }
        }
    }
    Ok(())
}

proptest! {
    #[test]
    fn sla_mask_structure(n in 1usize..12, seed in any::<u64>(), m in 0u32..6, pad in 0usize..3) {
        let s = tree_sentence(n, seed);
        let a = align(&[&s], pad);
        check_structure(&sla(&s, m, &a), &a)?;
    }

    #[test]
    fn window_mask_structure(n in 1usize..12, seed in any::<u64>(), k in 0usize..6, pad in 0usize..3) {
        let s = tree_sentence(n, seed);
        let a = align(&[&s], pad);
        check_structure(&build_window_mask(&a, k), &a)?;
    }

    #[test]
    fn allowed_set_grows_with_m(n in 1usize..12, seed in any::<u64>(), m in 0u32..8) {
        let s = tree_sentence(n, seed);
        let a = align(&[&s], 0);
        let lo = sla(&s, m, &a);
        let hi = sla(&s, m + 1, &a);
        for q in 0..a.seq_len() {
            for k in 0..a.seq_len() {
                prop_assert!(!lo.is_allowed(q, k) || hi.is_allowed(q, k));
            }
        }
    }

    #[test]
    fn direct_distance_pairs_stay_open(n in 1usize..12, seed in any::<u64>(), m in 0u32..6) {
        let s = tree_sentence(n, seed);
        let a = align(&[&s], 0);
        let dis = all_pairs_distance(&s);
        let mask = sla(&s, m, &a);
        for i in 0..n {
            for j in 0..n {
                if dis.get(i, j) <= m {
                    prop_assert!(mask.is_allowed(a.word_spans[0][i].start, a.word_spans[0][j].start));
                }
            }
        }
    }

    #[test]
    fn pair_blocks_match_single_sentence_masks(
        n1 in 1usize..8, n2 in 1usize..8, seed in any::<u64>(), m in 0u32..5,
    ) {
        let s1 = tree_sentence(n1, seed);
        let s2 = tree_sentence(n2, seed.wrapping_add(1));
        let a = align(&[&s1, &s2], 1);
        let d = |s: &DependencySentence| neighbor_min_distance(&all_pairs_distance(s));
        let pair = build_pair_mask(&d(&s1), &d(&s2), m, &a).unwrap();
        check_structure(&pair, &a)?;
        for (idx, s) in [&s1, &s2].into_iter().enumerate() {
            let single_a = align(&[s], 0);
            let single = sla(s, m, &single_a);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    prop_assert_eq!(
                        pair.get(a.word_spans[idx][i].start, a.word_spans[idx][j].start),
                        single.get(single_a.word_spans[0][i].start, single_a.word_spans[0][j].start)
                    );
                }
            }
        }
        for p in a.word_spans[0].iter().flat_map(|r| r.clone()) {
            for q in a.word_spans[1].iter().flat_map(|r| r.clone()) {
                prop_assert!(pair.is_allowed(p, q) && pair.is_allowed(q, p));
            }
        }
    }

    #[test]
    fn csv_round_trip(n in 1usize..10, seed in any::<u64>(), m in 0u32..4, pad in 0usize..3) {
        let s = tree_sentence(n, seed);
        let a = align(&[&s], pad);
        let mask = sla(&s, m, &a);
        prop_assert_eq!(AdditiveMask::from_allow_csv(&mask.to_allow_csv()).unwrap(), mask);
    }
}

#[test]
fn chain_sla_equals_window_one_wider() {
    for n in 1..=10 {
        let s = chain(n);
        let a = align(&[&s], 0);
        for m in 0..10u32 {
            assert_eq!(sla(&s, m, &a), build_window_mask(&a, m as usize + 1), "n={n} m={m}");
        }
    }
}

#[test]
fn threshold_at_diameter_opens_everything() {
    for seed in 0..50 {
        let s = tree_sentence(9, seed);
        let a = align(&[&s], 2);
        let diameter = all_pairs_distance(&s).diameter();
        let mask = sla(&s, diameter, &a);
        assert_eq!(mask.allowed_count(), a.pad_from * a.pad_from + 2 * a.pad_from);
    }
}
