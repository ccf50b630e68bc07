use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taste_core::check::random_matrix;
use taste_core::tokenizer::QuantizerState;
use taste_core::Matrix;

/// Greedy residual search written out directly: scan every codeword of each
/// layer, keep the first strict minimum, subtract it.
fn brute_force(books: &[Matrix], x: &[f64]) -> Vec<usize> {
    let mut residual = x.to_vec();
    let mut codes = Vec::new();
    for book in books {
        let dists: Vec<f64> = (0..book.rows())
            .map(|c| residual.iter().enumerate().map(|(k, r)| (r - book.get(c, k)).powi(2)).sum())
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let best = dists.iter().position(|&d| d == min).unwrap();
        for (k, r) in residual.iter_mut().enumerate() {
            *r -= book.get(best, k);
        }
        codes.push(best);
    }
    codes
}

proptest! {
    #[test]
    fn codes_match_brute_force(seed in any::<u64>(), layers in 1usize..=2, size in 1usize..=16, dim in 1usize..=4, dup in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut books: Vec<Matrix> = (0..layers).map(|_| random_matrix(&mut rng, size, dim)).collect();
        if dup && size > 1 {
            let row = books[0].row(0).to_vec();
            books[0].row_mut(size - 1).copy_from_slice(&row);
        }
        let q = QuantizerState::from_codebooks(books.clone(), 0.99).unwrap();
        let mut x = random_matrix(&mut rng, 8, dim);
        let exact = books[0].row(size / 2).to_vec();
        x.row_mut(0).copy_from_slice(&exact);
        let out = q.quantize(&x).unwrap();
        for i in 0..x.rows() {
            prop_assert_eq!(out.codes.column(i), brute_force(&books, x.row(i)));
        }
    }

    #[test]
    fn dequantize_reproduces_embedding_bitwise(seed in any::<u64>(), rows in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let books: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut rng, 64, 6)).collect();
        let q = QuantizerState::from_codebooks(books, 0.99).unwrap();
        let x = random_matrix(&mut rng, rows, 6);
        let out = q.quantize(&x).unwrap();
        let back = q.dequantize(&out.codes).unwrap();
        prop_assert!(back.data().iter().zip(out.embedding.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn embedding_is_the_sum_of_selected_codewords(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let books: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 5, 3)).collect();
        let q = QuantizerState::from_codebooks(books.clone(), 0.99).unwrap();
        let x = random_matrix(&mut rng, 4, 3);
        let out = q.quantize(&x).unwrap();
        for i in 0..4 {
            for k in 0..3 {
                let mut s = 0.0;
                for (r, book) in books.iter().enumerate() {
                    s += book.get(out.codes.get(r, i), k);
                }
                prop_assert_eq!(s.to_bits(), out.embedding.get(i, k).to_bits());
            }
        }
    }
}
