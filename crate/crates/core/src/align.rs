//! Word-level grouping, averaging and re-alignment across two tokenizations
//! of the same transcript, plus word-aligned code editing.
//!
//! The speech representation is aligned with one tokenizer (the recognizer
//! side, `N` positions) while the language model reads another (`M`
//! positions). Both tokenizations partition the same `W` words, so the
//! representation is averaged per word and each word's mean is repeated once
//! per language-model token of that word.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::codes::CodeGrid;
use crate::error::{bail, Result};
use crate::graph::{segment_means, Graph, Var};
use crate::tensor::Matrix;

/// Contiguous, non-empty, ordered ranges exactly tiling `0..total`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordGroups {
    ranges: Vec<Range<usize>>,
}

impl WordGroups {
    pub fn new(ranges: Vec<Range<usize>>, total: usize) -> Result<Self> {
        if ranges.is_empty() {
            bail!(Argument, "word groups must cover at least one word");
        }
        let mut next = 0;
        for (w, r) in ranges.iter().enumerate() {
            if r.start != next {
                bail!(
                    Argument,
                    "word group {} starts at {} but the previous group ended at {}",
                    w,
                    r.start,
                    next
                );
            }
            if r.end <= r.start {
                bail!(Argument, "word group {} ({:?}) is empty", w, r);
            }
            next = r.end;
        }
        if next != total {
            bail!(Argument, "word groups cover 0..{} but the sequence has {} items", next, total);
        }
        Ok(Self { ranges })
    }

    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        let mut ranges = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &l in lengths {
            ranges.push(start..start + l);
            start += l;
        }
        Self::new(ranges, start)
    }

    /// Number of words `W`.
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Length of the underlying sequence.
    pub fn total(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    /// Word index of every position of the underlying sequence.
    pub fn word_of_position(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for (w, r) in self.ranges.iter().enumerate() {
            out.extend(core::iter::repeat_n(w, r.len()));
        }
        out
    }

    /// Groups covering only the first `words` words.
    pub fn truncate(&self, words: usize) -> Result<Self> {
        if words == 0 || words > self.len() {
            bail!(Argument, "cannot keep {} of {} words", words, self.len());
        }
        Ok(Self {
            ranges: self.ranges[..words].to_vec(),
        })
    }
}

/// Splits `seq` into its word groups.
pub fn group_by_words<'a, T>(seq: &'a [T], groups: &WordGroups) -> Result<Vec<&'a [T]>> {
    if groups.total() != seq.len() {
        bail!(
            Argument,
            "groups cover {} items but the sequence has {}",
            groups.total(),
            seq.len()
        );
    }
    Ok(groups.ranges.iter().map(|r| &seq[r.clone()]).collect())
}

/// Mean row of each word group: `[N × d] → [W × d]`.
pub fn word_average(rows: &Matrix, groups: &WordGroups) -> Result<Matrix> {
    if groups.total() != rows.rows() {
        bail!(
            Argument,
            "groups cover {} rows but the embedding has {}",
            groups.total(),
            rows.rows()
        );
    }
    Ok(segment_means(rows, groups.ranges()))
}

/// Word-level rows repeated once per target token of their word.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedEmbedding {
    pub rows: Matrix,
    pub word_of_position: Vec<usize>,
}

pub fn align_to_llm(word_rows: &Matrix, llm_groups: &WordGroups) -> Result<AlignedEmbedding> {
    if llm_groups.len() != word_rows.rows() {
        bail!(
            Argument,
            "{} word rows but the target tokenization has {} words",
            word_rows.rows(),
            llm_groups.len()
        );
    }
    let word_of_position = llm_groups.word_of_position();
    Ok(AlignedEmbedding {
        rows: word_rows.select_rows(&word_of_position),
        word_of_position,
    })
}

/// Word-level codes (`R × W`) repeated per target token (`R × M`).
pub fn align_codes(word_codes: &CodeGrid, llm_groups: &WordGroups) -> Result<CodeGrid> {
    if llm_groups.len() != word_codes.len() {
        bail!(
            Argument,
            "{} word columns but the target tokenization has {} words",
            word_codes.len(),
            llm_groups.len()
        );
    }
    Ok(word_codes.select(&llm_groups.word_of_position()))
}

/// Differentiable [`word_average`].
pub fn word_average_var(g: &mut Graph, rows: Var, groups: &WordGroups) -> Result<Var> {
    if groups.total() != g.shape(rows).0 {
        bail!(
            Argument,
            "groups cover {} rows but the embedding has {}",
            groups.total(),
            g.shape(rows).0
        );
    }
    g.segment_mean(rows, groups.ranges().to_vec())
}

/// Differentiable expansion of word rows to one row per grouped position.
pub fn expand_words_var(g: &mut Graph, word_rows: Var, groups: &WordGroups) -> Result<Var> {
    if groups.len() != g.shape(word_rows).0 {
        bail!(
            Argument,
            "{} word rows for {} word groups",
            g.shape(word_rows).0,
            groups.len()
        );
    }
    g.gather(word_rows, groups.word_of_position())
}

/// A code sequence together with the transcript it encodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordCodes {
    pub words: Vec<String>,
    pub codes: CodeGrid,
    pub groups: WordGroups,
}

impl WordCodes {
    pub fn new(words: Vec<String>, codes: CodeGrid, groups: WordGroups) -> Result<Self> {
        if groups.len() != words.len() {
            bail!(Argument, "{} groups for {} words", groups.len(), words.len());
        }
        if groups.total() != codes.len() {
            bail!(Argument, "groups cover {} positions, codes have {}", groups.total(), codes.len());
        }
        Ok(Self { words, codes, groups })
    }

    /// Code columns of word `w`.
    pub fn word_block(&self, w: usize) -> CodeGrid {
        let cols: Vec<usize> = self.groups.ranges()[w].clone().collect();
        self.codes.select(&cols)
    }
}

/// Exchanges the code blocks of the selected words between two renditions
/// of the same transcript. Blocks are spliced whole, so words whose groups
/// differ in length move with their own length.
pub fn swap_word_tokens(a: &WordCodes, b: &WordCodes, words: &[usize]) -> Result<(WordCodes, WordCodes)> {
    if a.words != b.words {
        bail!(Argument, "the two code sequences encode different transcripts");
    }
    if a.codes.num_layers() != b.codes.num_layers() {
        bail!(
            Argument,
            "layer counts differ ({} vs {})",
            a.codes.num_layers(),
            b.codes.num_layers()
        );
    }
    let w_count = a.words.len();
    if let Some(&bad) = words.iter().find(|&&w| w >= w_count) {
        bail!(Argument, "word index {} out of range for {} words", bad, w_count);
    }
    let mut swap = alloc::vec![false; w_count];
    for &w in words {
        swap[w] = true;
    }
    let splice = |first: &WordCodes, second: &WordCodes| -> Result<WordCodes> {
        let mut columns = Vec::new();
        let mut lengths = Vec::with_capacity(w_count);
        for (w, &s) in swap.iter().enumerate() {
            let src = if s { second } else { first };
            let r = src.groups.ranges()[w].clone();
            lengths.push(r.len());
            columns.extend(r.map(|p| src.codes.column(p)));
        }
        WordCodes::new(
            first.words.clone(),
            CodeGrid::from_columns(first.codes.num_layers(), &columns)?,
            WordGroups::from_lengths(&lengths)?,
        )
    };
    Ok((splice(a, b)?, splice(b, a)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn grouping_examples() {
        let groups = WordGroups::new(vec![0..2, 2..3], 3).unwrap();
        let g = group_by_words(&['a', 'b', 'c'], &groups).unwrap();
        assert_eq!(g, vec![&['a', 'b'][..], &['c'][..]]);

        let one = WordGroups::new(vec![0..3], 3).unwrap();
        assert_eq!(group_by_words(&[1, 2, 3], &one).unwrap(), vec![&[1, 2, 3][..]]);

        assert!(WordGroups::new(vec![0..1, 2..3], 3).is_err());
        assert!(WordGroups::new(vec![0..1, 1..1, 1..3], 3).is_err());
        assert!(WordGroups::new(vec![0..2], 3).is_err());
    }

    #[test]
    fn averaging_examples() {
        let rows = Matrix::from_rows(&[[1.0, 3.0], [5.0, 7.0], [7.0, 9.0]]).unwrap();
        let groups = WordGroups::from_lengths(&[1, 2]).unwrap();
        let avg = word_average(&rows, &groups).unwrap();
        assert_eq!(avg, Matrix::from_rows(&[[1.0, 3.0], [6.0, 8.0]]).unwrap());

        let singles = WordGroups::from_lengths(&[1, 1, 1]).unwrap();
        assert_eq!(word_average(&rows, &singles).unwrap(), rows);
    }

    #[test]
    fn alignment_examples() {
        let z_bar = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let llm = WordGroups::from_lengths(&[3, 1]).unwrap();
        let aligned = align_to_llm(&z_bar, &llm).unwrap();
        assert_eq!(
            aligned.rows,
            Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [3.0, 4.0]]).unwrap()
        );
        assert_eq!(aligned.word_of_position, vec![0, 0, 0, 1]);

        let ones = WordGroups::from_lengths(&[1, 1]).unwrap();
        assert_eq!(align_to_llm(&z_bar, &ones).unwrap().rows, z_bar);

        let single = Matrix::from_rows(&[[0.5, -0.5]]).unwrap();
        let m = align_to_llm(&single, &WordGroups::from_lengths(&[4]).unwrap()).unwrap();
        assert_eq!(m.rows, single.select_rows(&[0, 0, 0, 0]));

        assert!(align_to_llm(&z_bar, &WordGroups::from_lengths(&[2]).unwrap()).is_err());
    }

    fn word_codes(words: &[&str], lengths: &[usize], base: usize) -> WordCodes {
        let n: usize = lengths.iter().sum();
        let codes = CodeGrid::new(vec![
            (0..n).map(|i| base + i).collect(),
            (0..n).map(|i| base + 100 + i).collect(),
        ])
        .unwrap();
        WordCodes::new(
            words.iter().map(|w| w.to_string()).collect(),
            codes,
            WordGroups::from_lengths(lengths).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn swap_exchanges_only_selected_words() {
        let a = word_codes(&["one", "two", "three"], &[2, 1, 2], 0);
        let b = word_codes(&["one", "two", "three"], &[2, 1, 2], 50);
        let (ea, eb) = swap_word_tokens(&a, &b, &[1]).unwrap();
        assert_eq!(ea.word_block(0), a.word_block(0));
        assert_eq!(ea.word_block(1), b.word_block(1));
        assert_eq!(ea.word_block(2), a.word_block(2));
        assert_eq!(eb.word_block(1), a.word_block(1));
        assert_eq!(eb.word_block(2), b.word_block(2));

        let (na, nb) = swap_word_tokens(&a, &b, &[]).unwrap();
        assert_eq!((na, nb), (a.clone(), b.clone()));

        let (all_a, _) = swap_word_tokens(&a, &b, &[0, 1, 2]).unwrap();
        assert_eq!(all_a, b);
    }

    #[test]
    fn swap_splices_variable_length_blocks() {
        let a = word_codes(&["x", "y"], &[1, 3], 0);
        let b = word_codes(&["x", "y"], &[2, 1], 50);
        let (ea, eb) = swap_word_tokens(&a, &b, &[0]).unwrap();
        assert_eq!(ea.groups.lengths(), vec![2, 3]);
        assert_eq!(ea.word_block(0), b.word_block(0));
        assert_eq!(ea.word_block(1), a.word_block(1));
        assert_eq!(eb.groups.lengths(), vec![1, 1]);
        let (all, _) = swap_word_tokens(&a, &b, &[0, 1]).unwrap();
        assert_eq!(all, b);
    }

    #[test]
    fn swap_rejects_bad_inputs() {
        let a = word_codes(&["x", "y"], &[1, 1], 0);
        let b = word_codes(&["x", "z"], &[1, 1], 0);
        assert!(swap_word_tokens(&a, &b, &[0]).is_err());
        assert!(swap_word_tokens(&a, &a, &[2]).is_err());
    }
}
