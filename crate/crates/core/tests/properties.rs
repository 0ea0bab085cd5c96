//! Property tests for the alignment pipeline, numeric kernels, BLEU and the
//! synthetic task generator.

use proptest::prelude::*;
use reorder_core::autodiff::Axis;
use reorder_core::eval::corpus_bleu;
use reorder_core::synth::{generate, substitution, target_token, PermutationFamily, SynthTaskSpec};
use reorder_core::*;

fn alignment() -> impl Strategy<Value = AlignmentSet> {
    (1usize..9, 1usize..9).prop_flat_map(|(j, i)| {
        proptest::collection::vec((0..j, 0..i), 0..12)
            .prop_map(move |links| AlignmentSet::new(j, i, links).unwrap())
    })
}

fn permutation(max: usize) -> impl Strategy<Value = Vec<usize>> {
    (1..=max).prop_flat_map(|n| Just((0..n).collect::<Vec<_>>()).prop_shuffle())
}

/// All permutations of `0..n` in lexicographic order.
fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #[test]
    fn derived_positions_are_permutations(a in alignment()) {
        let r = derive_reordered_positions(&a);
        let mut seen = r.as_slice().to_vec();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..a.src_len()).collect::<Vec<_>>());
    }

    #[test]
    fn monotone_one_to_one_alignment_is_identity(n in 1usize..10) {
        let a = AlignmentSet::new(n, n, (0..n).map(|k| (k, k))).unwrap();
        prop_assert!(derive_reordered_positions(&a).is_identity());
    }

    #[test]
    fn reorder_then_inverse_round_trips(p in permutation(9)) {
        let r = PositionSequence::new(p.clone()).unwrap();
        let tokens: Vec<String> = (0..p.len()).map(|k| format!("w{k}")).collect();
        let moved = reorder_tokens(&tokens, &r).unwrap();
        prop_assert_eq!(reorder_tokens(&moved, &r.inverse()).unwrap(), tokens);
    }

    #[test]
    fn one_to_one_links_recover_the_permutation(p in permutation(9)) {
        let a = AlignmentSet::new(p.len(), p.len(), p.iter().copied().enumerate()).unwrap();
        let r = derive_reordered_positions(&a);
        prop_assert_eq!(r.as_slice(), p.as_slice());
    }

    #[test]
    fn kendall_tau_matches_pair_count(p in permutation(9)) {
        let n = p.len();
        let mut inv = 0;
        for a in 0..n {
            for b in a + 1..n {
                inv += usize::from(p[a] > p[b]);
            }
        }
        let r = PositionSequence::new(p).unwrap();
        prop_assert_eq!(r.inversions(), inv);
        let want = if n < 2 { 0.0 } else { inv as f64 / (n * (n - 1) / 2) as f64 };
        prop_assert!((r.kendall_tau_distance() - want).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::new(0);
        let s = tape.constant(3, 4, xs).unwrap().softmax(Axis::Cols).value();
        for row in s.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_standardises(xs in proptest::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-3));
        let tape = Tape::new(0);
        let g = tape.constant(1, 8, vec![1.0; 8]).unwrap();
        let b = tape.constant(1, 8, vec![0.0; 8]).unwrap();
        let y = tape.constant(1, 8, xs).unwrap().layer_norm(g, b, 1e-9).unwrap().value();
        let mean = y.iter().sum::<f64>() / 8.0;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bleu_is_invariant_to_line_order(lines in proptest::collection::vec(
        (proptest::collection::vec(0u8..6, 1..9), proptest::collection::vec(0u8..6, 1..9)), 1..6),
        rot in 0usize..6)
    {
        let (h, r): (Vec<_>, Vec<_>) = lines.into_iter().unzip();
        let k = rot % h.len();
        let mut h2 = h.clone();
        let mut r2 = r.clone();
        h2.rotate_left(k);
        r2.rotate_left(k);
        let a = corpus_bleu(&h, &r).unwrap();
        prop_assert!((a - corpus_bleu(&h2, &r2).unwrap()).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a));
        // like multi-bleu, a corpus without any 4-gram scores 0 even against itself
        let want = if h.iter().any(|l| l.len() >= 4) { 100.0 } else { 0.0 };
        prop_assert_eq!(corpus_bleu(&h, &h).unwrap(), want);
    }

    #[test]
    fn synthetic_pairs_round_trip(seed in 0u64..1000) {
        let spec = SynthTaskSpec { vocab: 12, min_len: 1, max_len: 10, marked: 4, ..SynthTaskSpec::distant(seed) };
        let subst = substitution(&spec);
        for rec in generate(&spec, 8).unwrap().records {
            let a = rec.alignment.as_ref().unwrap();
            prop_assert_eq!(a.len(), rec.src.len());
            let r = derive_reordered_positions(a);
            let moved = reorder_tokens(&rec.src, &r).unwrap();
            let mapped: Vec<String> = moved.iter().map(|t| target_token(subst[t[1..].parse::<usize>().unwrap()])).collect();
            prop_assert_eq!(mapped, rec.tgt);
        }
    }

    #[test]
    fn head_final_matches_brute_force(tokens in proptest::collection::vec(0usize..6, 1..=7)) {
        let marked = |t: usize| t < 2;
        let got = PermutationFamily::HeadFinal.positions(&tokens, marked);
        // the only permutation that puts every unmarked word before every
        // marked one while preserving the order within each group
        let ok: Vec<Vec<usize>> = all_permutations(tokens.len())
            .into_iter()
            .filter(|r| {
                let mut placed = vec![usize::MAX; r.len()];
                for (j, &s) in r.iter().enumerate() {
                    placed[s] = j;
                }
                let flags: Vec<bool> = placed.iter().map(|&j| marked(tokens[j])).collect();
                let partitioned = flags.windows(2).all(|w| !(w[0] && !w[1]));
                let stable = (0..r.len()).all(|a| (a + 1..r.len()).all(|b| marked(tokens[a]) != marked(tokens[b]) || r[a] < r[b]));
                partitioned && stable
            })
            .collect();
        prop_assert_eq!(ok, vec![got]);
    }
}

#[test]
fn family_examples() {
    let ids: Vec<usize> = (0..4).collect();
    let spec = |order| SynthTaskSpec { order, ..SynthTaskSpec::distant(1) };
    assert!(spec(vec![PermutationFamily::Identity]).positions(&ids).is_identity());
    assert_eq!(spec(vec![PermutationFamily::Reverse]).positions(&ids).as_slice(), &[3, 2, 1, 0]);
    for rec in generate(&SynthTaskSpec::similar(3), 20).unwrap().records {
        assert!(rec.positions.unwrap().is_identity());
    }
}
