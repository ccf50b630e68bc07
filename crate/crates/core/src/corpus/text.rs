//! Lexicon, a small sentence grammar, and fixed-width subword tokenizers.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::align::WordGroups;
use crate::error::{bail, Error, Result};

/// Word classes used by the sentence grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub determiners: Vec<String>,
    pub adjectives: Vec<String>,
    pub nouns: Vec<String>,
    pub verbs: Vec<String>,
    pub adverbs: Vec<String>,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            determiners: owned(&["the", "a", "my", "one", "this"]),
            adjectives: owned(&["red", "small", "quiet", "happy", "old", "bright", "heavy", "gentle"]),
            nouns: owned(&[
                "cat", "dog", "river", "teacher", "garden", "window", "engine", "forest", "letter", "market",
            ]),
            verbs: owned(&["sees", "finds", "carries", "follows", "paints", "opens", "watches", "holds"]),
            adverbs: owned(&["today", "slowly", "again", "quickly", "outside", "together"]),
        }
    }
}

impl Lexicon {
    pub fn validate(&self) -> Result<()> {
        for (class, words) in [
            ("determiners", &self.determiners),
            ("nouns", &self.nouns),
            ("verbs", &self.verbs),
        ] {
            if words.is_empty() {
                bail!(Config, "vocabulary has no {}", class);
            }
        }
        for w in self.words() {
            if w.is_empty() || !w.bytes().all(|b| b.is_ascii_lowercase()) {
                bail!(Config, "vocabulary word `{}` must be non-empty lowercase ascii", w);
            }
        }
        Ok(())
    }

    /// Every distinct word, sorted.
    pub fn words(&self) -> BTreeSet<&str> {
        self.determiners
            .iter()
            .chain(&self.adjectives)
            .chain(&self.nouns)
            .chain(&self.verbs)
            .chain(&self.adverbs)
            .map(String::as_str)
            .collect()
    }

    fn pick<'a, R: Rng + ?Sized>(rng: &mut R, class: &'a [String]) -> &'a str {
        &class[rng.random_range(0..class.len())]
    }

    fn noun_phrase<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<String>) {
        out.push(Self::pick(rng, &self.determiners).to_string());
        if !self.adjectives.is_empty() && rng.random_bool(0.5) {
            out.push(Self::pick(rng, &self.adjectives).to_string());
        }
        out.push(Self::pick(rng, &self.nouns).to_string());
    }

    /// One sentence `det [adj] noun verb [det [adj] noun] [adv]`.
    pub fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<String> {
        let mut out = Vec::with_capacity(8);
        self.noun_phrase(rng, &mut out);
        out.push(Self::pick(rng, &self.verbs).to_string());
        if rng.random_bool(0.6) {
            self.noun_phrase(rng, &mut out);
        }
        if !self.adverbs.is_empty() && rng.random_bool(0.4) {
            out.push(Self::pick(rng, &self.adverbs).to_string());
        }
        out
    }

    /// Longest sentence the grammar can produce.
    pub fn max_sentence_len(&self) -> usize {
        let np = 2 + usize::from(!self.adjectives.is_empty());
        2 * np + 1 + usize::from(!self.adverbs.is_empty())
    }
}

/// Splits each word into fixed-width character pieces; the first piece of a
/// word carries a word-start marker so boundaries survive tokenization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordTokenizer {
    piece_len: usize,
    pieces: Vec<String>,
    index: BTreeMap<String, usize>,
    words: BTreeSet<String>,
}

pub const WORD_START: char = '▁';

/// Token ids plus the word partition they induce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub tokens: Vec<usize>,
    pub groups: WordGroups,
}

impl SubwordTokenizer {
    pub fn new(lexicon: &Lexicon, piece_len: usize) -> Result<Self> {
        if piece_len == 0 {
            bail!(Config, "piece length must be positive");
        }
        lexicon.validate()?;
        let words: BTreeSet<String> = lexicon.words().into_iter().map(String::from).collect();
        let mut set = BTreeSet::new();
        for w in &words {
            set.extend(split_word(w, piece_len));
        }
        let pieces: Vec<String> = set.into_iter().collect();
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Ok(Self {
            piece_len,
            pieces,
            index,
            words,
        })
    }

    pub fn piece_len(&self) -> usize {
        self.piece_len
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    /// Whether token `id` begins a word.
    pub fn is_word_start(&self, id: usize) -> bool {
        self.piece(id).is_some_and(|p| p.starts_with(WORD_START))
    }

    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<Tokenized> {
        if words.is_empty() {
            bail!(Argument, "cannot tokenize an empty word sequence");
        }
        let mut tokens = Vec::new();
        let mut lengths = Vec::with_capacity(words.len());
        for w in words {
            let w = w.as_ref();
            if !self.words.contains(w) {
                return Err(Error::OutOfVocabulary(w.to_string()));
            }
            let before = tokens.len();
            for p in split_word(w, self.piece_len) {
                tokens.push(self.index[&p]);
            }
            lengths.push(tokens.len() - before);
        }
        Ok(Tokenized {
            tokens,
            groups: WordGroups::from_lengths(&lengths)?,
        })
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Result<Vec<String>> {
        let mut words: Vec<String> = Vec::new();
        for &t in tokens {
            let Some(p) = self.piece(t) else {
                bail!(Argument, "token id {} outside vocabulary of {}", t, self.vocab_size());
            };
            match p.strip_prefix(WORD_START) {
                Some(rest) => words.push(rest.to_string()),
                None => match words.last_mut() {
                    Some(w) => w.push_str(p),
                    None => bail!(Argument, "token sequence starts inside a word"),
                },
            }
        }
        Ok(words)
    }
}

fn split_word(word: &str, piece_len: usize) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .chunks(piece_len)
        .enumerate()
        .map(|(i, c)| {
            let mut s = String::new();
            if i == 0 {
                s.push(WORD_START);
            }
            s.extend(c);
            s
        })
        .collect()
}
