//! Synthetic paired speech/text corpus.
//!
//! Generation is a pure function of `(seed, config)`: every utterance draws
//! from its own ChaCha stream keyed by its index.

mod synth;
mod text;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use synth::{accent_offset, letter_durations, synthesize, Contour, Prosody, Synthesis, UnitGrid, VoiceDesign};
pub use text::{Lexicon, SubwordTokenizer, Tokenized, WORD_START};

use crate::align::WordGroups;
use crate::error::{bail, Result};
use crate::tensor::Matrix;

/// Feature frames of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T × d_in]` frames.
    pub features: Matrix,
    pub duration_s: f64,
    pub speaker_id: usize,
}

impl Utterance {
    pub fn new(id: String, features: Matrix, frame_rate: f64, speaker_id: usize) -> Result<Self> {
        if features.rows() == 0 {
            bail!(Argument, "utterance `{}` has no frames", id);
        }
        if !features.is_finite() {
            bail!(Argument, "utterance `{}` has non-finite features", id);
        }
        let duration_s = features.rows() as f64 / frame_rate;
        Ok(Self {
            id,
            features,
            duration_s,
            speaker_id,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }
}

/// Words plus their two tokenizations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcription {
    pub words: Vec<String>,
    pub asr_tokens: Vec<usize>,
    pub asr_groups: WordGroups,
    pub llm_tokens: Vec<usize>,
    pub llm_groups: WordGroups,
}

impl Transcription {
    pub fn new(words: Vec<String>, asr: &SubwordTokenizer, llm: &SubwordTokenizer) -> Result<Self> {
        let a = asr.tokenize(&words)?;
        let l = llm.tokenize(&words)?;
        Ok(Self {
            words,
            asr_tokens: a.tokens,
            asr_groups: a.groups,
            llm_tokens: l.tokens,
            llm_groups: l.groups,
        })
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }
}

/// Discrete target units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitSequence {
    pub units: Vec<usize>,
}

impl UnitSequence {
    pub fn new(units: Vec<usize>, vocab: usize) -> Result<Self> {
        if units.is_empty() {
            bail!(Argument, "unit sequence is empty");
        }
        if let Some(&u) = units.iter().find(|&&u| u >= vocab) {
            bail!(Argument, "unit {} outside vocabulary of {}", u, vocab);
        }
        Ok(Self { units })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub lexicon: Lexicon,
    pub min_words: usize,
    pub max_words: usize,
    pub num_speakers: usize,
    pub frame_rate: f64,
    pub feature_dim: usize,
    /// Speaking-rate interval; each utterance draws uniformly from it.
    pub rate_range: (f64, f64),
    pub pitch_levels: usize,
    pub noise_std: f64,
    pub unit_stride: usize,
    pub phone_bins: usize,
    pub pitch_bins: usize,
    pub asr_piece_len: usize,
    pub llm_piece_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            lexicon: Lexicon::default(),
            min_words: 3,
            max_words: 8,
            num_speakers: 8,
            frame_rate: 50.0,
            feature_dim: 16,
            rate_range: (0.8, 1.2),
            pitch_levels: 4,
            noise_std: 0.05,
            unit_stride: 4,
            phone_bins: 4,
            pitch_bins: 8,
            asr_piece_len: 2,
            llm_piece_len: 3,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.lexicon.validate()?;
        if self.min_words < 3 || self.min_words > self.max_words {
            bail!(Config, "sentence length range {}..={} is invalid", self.min_words, self.max_words);
        }
        if self.min_words > self.lexicon.max_sentence_len() {
            bail!(
                Config,
                "grammar cannot produce sentences of {} words",
                self.min_words
            );
        }
        if self.num_speakers == 0 {
            bail!(Config, "need at least one speaker");
        }
        if !(self.frame_rate > 0.0) || self.feature_dim < 6 {
            bail!(Config, "frame rate must be positive and feature width at least 6");
        }
        let (lo, hi) = self.rate_range;
        if !(lo > 0.0 && lo <= hi) {
            bail!(Config, "speaking-rate range ({}, {}) is invalid", lo, hi);
        }
        if self.pitch_levels == 0 || self.unit_stride == 0 || self.phone_bins == 0 || self.pitch_bins == 0 {
            bail!(Config, "pitch levels, unit stride and bin counts must be positive");
        }
        if self.asr_piece_len == 0 || self.llm_piece_len == 0 {
            bail!(Config, "piece lengths must be positive");
        }
        Ok(())
    }

    pub fn asr_tokenizer(&self) -> Result<SubwordTokenizer> {
        SubwordTokenizer::new(&self.lexicon, self.asr_piece_len)
    }

    pub fn llm_tokenizer(&self) -> Result<SubwordTokenizer> {
        SubwordTokenizer::new(&self.lexicon, self.llm_piece_len)
    }

    pub fn unit_grid(&self) -> UnitGrid {
        UnitGrid::new(self.feature_dim, self.unit_stride, self.phone_bins, self.pitch_bins)
    }

    pub fn num_units(&self) -> usize {
        self.phone_bins * self.pitch_bins
    }

    /// A sentence within the configured length range.
    pub fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<String> {
        loop {
            let s = self.lexicon.sentence(rng);
            if (self.min_words..=self.max_words).contains(&s.len()) {
                return s;
            }
        }
    }

    /// Draws prosody for a sentence of `words` words.
    pub fn prosody<R: Rng + ?Sized>(&self, rng: &mut R, words: usize) -> Prosody {
        let (lo, hi) = self.rate_range;
        let rate = if hi > lo { rng.random_range(lo..hi) } else { lo };
        Prosody {
            rate,
            word_pitch: (0..words)
                .map(|_| accent_offset(rng.random_range(0..self.pitch_levels), self.pitch_levels))
                .collect(),
            word_contours: (0..words).map(|_| Contour::ALL[rng.random_range(0..4)]).collect(),
        }
    }
}

/// One paired corpus entry.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub utterance: Utterance,
    pub transcription: Transcription,
    pub units: UnitSequence,
    /// Frames covered by each recognizer-side token (ground-truth alignment).
    pub token_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub config: CorpusConfig,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn num_units(&self) -> usize {
        self.config.num_units()
    }
}

/// Stream-keyed generator for utterance `index` of a corpus seeded `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Builds one corpus item from explicit choices.
pub fn render_item(
    config: &CorpusConfig,
    design: &VoiceDesign,
    tokenizers: (&SubwordTokenizer, &SubwordTokenizer),
    id: String,
    words: Vec<String>,
    speaker: usize,
    prosody: &Prosody,
    rng: &mut ChaCha8Rng,
) -> Result<CorpusItem> {
    if speaker >= config.num_speakers {
        bail!(Argument, "speaker {} outside {} speakers", speaker, config.num_speakers);
    }
    let transcription = Transcription::new(words, tokenizers.0, tokenizers.1)?;
    let refs: Vec<&str> = transcription.words.iter().map(String::as_str).collect();
    let synth = synthesize(design, &refs, speaker, prosody, config.asr_piece_len, config.noise_std, rng);
    let units = UnitSequence::new(config.unit_grid().units(&synth.features), config.num_units())?;
    debug_assert_eq!(synth.piece_frames.len(), transcription.asr_tokens.len());
    Ok(CorpusItem {
        utterance: Utterance::new(id, synth.features, config.frame_rate, speaker)?,
        transcription,
        units,
        token_frames: synth.piece_frames,
    })
}

/// Generates `num_utterances` paired items.
pub fn generate_corpus(seed: u64, num_utterances: usize, config: &CorpusConfig) -> Result<Corpus> {
    if num_utterances < 1 {
        bail!(Argument, "need at least one utterance");
    }
    config.validate()?;
    let asr = config.asr_tokenizer()?;
    let llm = config.llm_tokenizer()?;
    let design = VoiceDesign::new(config.feature_dim);
    let mut items = Vec::with_capacity(num_utterances);
    for i in 0..num_utterances {
        let mut rng = item_rng(seed, i as u64);
        let words = config.sentence(&mut rng);
        let speaker = rng.random_range(0..config.num_speakers);
        let prosody = config.prosody(&mut rng, words.len());
        items.push(render_item(
            config,
            &design,
            (&asr, &llm),
            format!("utt{i:05}"),
            words,
            speaker,
            &prosody,
            &mut rng,
        )?);
    }
    Ok(Corpus {
        seed,
        config: config.clone(),
        items,
    })
}

/// Text-only sentences for language-model pretraining, from a stream
/// disjoint from any corpus item.
pub fn generate_sentences(seed: u64, count: usize, config: &CorpusConfig) -> Result<Vec<Vec<String>>> {
    config.validate()?;
    let mut rng = item_rng(seed, u64::MAX);
    Ok((0..count).map(|_| config.sentence(&mut rng)).collect())
}
