use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taste_core::align::{align_codes, align_to_llm, swap_word_tokens, word_average, word_average_var, WordCodes, WordGroups};
use taste_core::check::random_matrix;
use taste_core::codes::CodeGrid;
use taste_core::{Graph, Matrix};

fn lengths() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..10)
}

fn segment_mean_oracle(rows: &Matrix, lengths: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(lengths.len(), rows.cols());
    let mut start = 0;
    for (w, &n) in lengths.iter().enumerate() {
        for k in 0..rows.cols() {
            let mut s = 0.0;
            for r in start..start + n {
                s += rows.get(r, k);
            }
            out.set(w, k, s / n as f64);
        }
        start += n;
    }
    out
}

fn codes(rng: &mut ChaCha8Rng, layers: usize, n: usize) -> CodeGrid {
    CodeGrid::new((0..layers).map(|_| (0..n).map(|_| rng.random_range(0..32)).collect()).collect()).unwrap()
}

proptest! {
    #[test]
    fn averaging_matches_segment_means(asr in lengths(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = WordGroups::from_lengths(&asr).unwrap();
        let rows = random_matrix(&mut rng, groups.total(), 4);
        let oracle = segment_mean_oracle(&rows, &asr);
        prop_assert_eq!(&word_average(&rows, &groups).unwrap(), &oracle);
        let mut g = Graph::new();
        let x = g.input(rows);
        let v = word_average_var(&mut g, x, &groups).unwrap();
        prop_assert_eq!(g.value(v), &oracle);
    }

    #[test]
    fn alignment_repeats_each_word_over_its_target_group(
        (asr, llm) in lengths().prop_flat_map(|a| { let n = a.len(); (Just(a), prop::collection::vec(1usize..5, n)) }),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let asr_g = WordGroups::from_lengths(&asr).unwrap();
        let llm_g = WordGroups::from_lengths(&llm).unwrap();
        let words = word_average(&random_matrix(&mut rng, asr_g.total(), 3), &asr_g).unwrap();
        let aligned = align_to_llm(&words, &llm_g).unwrap();
        prop_assert_eq!(aligned.rows.rows(), llm.iter().sum::<usize>());
        for (w, range) in llm_g.ranges().iter().enumerate() {
            for r in range.clone() {
                prop_assert_eq!(aligned.rows.row(r), words.row(w));
                prop_assert_eq!(aligned.word_of_position[r], w);
            }
        }
        let word_codes = codes(&mut rng, 2, asr.len());
        let expanded = align_codes(&word_codes, &llm_g).unwrap();
        prop_assert_eq!(expanded.len(), llm_g.total());
        for (w, range) in llm_g.ranges().iter().enumerate() {
            for r in range.clone() {
                prop_assert_eq!(expanded.column(r), word_codes.column(w));
            }
        }
    }

    #[test]
    fn swapping_is_local_and_an_involution(
        (la, lb) in lengths().prop_flat_map(|a| { let n = a.len(); (Just(a), prop::collection::vec(1usize..5, n)) }),
        seed in any::<u64>(),
        mask in any::<u16>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..la.len()).map(|i| format!("w{i}")).collect();
        let a = WordCodes::new(names.clone(), codes(&mut rng, 3, la.iter().sum()), WordGroups::from_lengths(&la).unwrap()).unwrap();
        let b = WordCodes::new(names, codes(&mut rng, 3, lb.iter().sum()), WordGroups::from_lengths(&lb).unwrap()).unwrap();
        let chosen: Vec<usize> = (0..la.len()).filter(|w| mask & (1 << w) != 0).collect();
        let (ea, eb) = swap_word_tokens(&a, &b, &chosen).unwrap();
        for w in 0..la.len() {
            let (src_a, src_b) = if chosen.contains(&w) { (&b, &a) } else { (&a, &b) };
            prop_assert_eq!(ea.word_block(w), src_a.word_block(w));
            prop_assert_eq!(eb.word_block(w), src_b.word_block(w));
        }
        let (ra, rb) = swap_word_tokens(&ea, &eb, &chosen).unwrap();
        prop_assert_eq!(ra, a.clone());
        prop_assert_eq!(rb, b);
        let (same, _) = swap_word_tokens(&a, &ea, &[]).unwrap();
        prop_assert_eq!(same, a);
    }
}
