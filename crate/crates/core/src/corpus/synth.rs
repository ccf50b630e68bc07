//! Deterministic words → feature-frame synthesis and the fixed unit grid.
//!
//! Each frame has `d` features laid out as
//! `[phonetic (d-4) | pitch | pitch slope | timbre (2)]`. Phonetic content
//! depends on the letters of the word, pitch on the speaker plus a per-word
//! accent level and contour, durations on a per-utterance speaking rate.
//! Accent and rate are not recoverable from the text.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Matrix;

const DESIGN_SEED: u64 = 0x5EED_7A57;
const LETTERS: usize = 26;

/// Pitch movement across a word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Contour {
    Flat,
    Rise,
    Fall,
    Peak,
}

impl Contour {
    pub const ALL: [Contour; 4] = [Contour::Flat, Contour::Rise, Contour::Fall, Contour::Peak];

    /// Offset and slope at relative position `p ∈ [0, 1]`.
    fn shape(self, p: f64) -> (f64, f64) {
        const A: f64 = 0.35;
        match self {
            Contour::Flat => (0.0, 0.0),
            Contour::Rise => (A * (2.0 * p - 1.0), 2.0 * A),
            Contour::Fall => (A * (1.0 - 2.0 * p), -2.0 * A),
            Contour::Peak => {
                let s = libm::sin(core::f64::consts::PI * p);
                (A * (2.0 * s - 1.0), 2.0 * A * core::f64::consts::PI * libm::cos(core::f64::consts::PI * p))
            }
        }
    }
}

/// Paralinguistic choices for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prosody {
    /// Speaking rate; larger is faster.
    pub rate: f64,
    /// Accent pitch offset of each word.
    pub word_pitch: Vec<f64>,
    pub word_contours: Vec<Contour>,
}

/// Pitch offset of accent level `level` out of `levels`, centered on zero.
pub fn accent_offset(level: usize, levels: usize) -> f64 {
    0.5 * (level as f64 - (levels.max(1) - 1) as f64 / 2.0)
}

/// Fixed (corpus-independent) acoustic design for a feature width.
#[derive(Clone, Debug)]
pub struct VoiceDesign {
    dim: usize,
    formants: Vec<Vec<f64>>,
    projection: Vec<f64>,
}

impl VoiceDesign {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 6, "feature width must be at least 6");
        let phon = dim - 4;
        let mut rng = ChaCha8Rng::seed_from_u64(DESIGN_SEED);
        let formants = (0..LETTERS)
            .map(|_| (0..phon).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let raw: Vec<f64> = (0..phon).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = libm::sqrt(raw.iter().map(|x| x * x).sum::<f64>());
        Self {
            dim,
            formants,
            projection: raw.into_iter().map(|x| x / norm).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn phonetic_dims(&self) -> usize {
        self.dim - 4
    }

    fn formant(&self, c: char) -> &[f64] {
        let i = (c as usize).wrapping_sub('a' as usize) % LETTERS;
        &self.formants[i]
    }

    /// (phonetic offset, base pitch, timbre) for a speaker.
    fn speaker(&self, id: usize) -> (Vec<f64>, f64, [f64; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(DESIGN_SEED);
        rng.set_stream(1 + id as u64);
        let offset = (0..self.phonetic_dims()).map(|_| rng.random_range(-0.15..0.15)).collect();
        let base = rng.random_range(-0.5..0.5);
        let timbre = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        (offset, base, timbre)
    }
}

/// Base frame count of a letter at speaking rate 1.
fn letter_frames(c: char) -> f64 {
    if matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y') {
        4.0
    } else {
        2.0
    }
}

/// Frames per letter of `word` at `rate`.
pub fn letter_durations(word: &str, rate: f64) -> Vec<usize> {
    word.chars()
        .map(|c| (libm::round(letter_frames(c) / rate) as usize).max(1))
        .collect()
}

/// Output of [`synthesize`].
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub features: Matrix,
    /// Frames covered by each word.
    pub word_frames: Vec<usize>,
    /// Frames covered by each `piece_len`-letter piece, in token order.
    pub piece_frames: Vec<usize>,
}

/// Renders `words` for `speaker` under `prosody`. Features are rounded to
/// `f32` precision so stored copies reproduce them exactly.
pub fn synthesize<R: Rng + ?Sized>(
    design: &VoiceDesign,
    words: &[&str],
    speaker: usize,
    prosody: &Prosody,
    piece_len: usize,
    noise_std: f64,
    rng: &mut R,
) -> Synthesis {
    let (offset, base_pitch, timbre) = design.speaker(speaker);
    let d = design.dim;
    let phon = design.phonetic_dims();
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite noise");
    let mut rows: Vec<f64> = Vec::new();
    let mut word_frames = Vec::with_capacity(words.len());
    let mut piece_frames = Vec::new();
    for (w, word) in words.iter().enumerate() {
        let chars: Vec<char> = word.chars().collect();
        let durs = letter_durations(word, prosody.rate);
        let total: usize = durs.iter().sum();
        let level_offset = prosody.word_pitch[w];
        let contour = prosody.word_contours[w];
        let mut t = 0usize;
        for (k, (&c, &n)) in chars.iter().zip(&durs).enumerate() {
            if k % piece_len == 0 {
                piece_frames.push(0);
            }
            *piece_frames.last_mut().unwrap() += n;
            let here = design.formant(c);
            let next = design.formant(*chars.get(k + 1).unwrap_or(&c));
            for j in 0..n {
                let blend = 0.3 * (j as f64 + 0.5) / n as f64;
                let p = (t as f64 + 0.5) / total as f64;
                let (shape, slope) = contour.shape(p);
                for i in 0..phon {
                    rows.push(here[i] * (1.0 - blend) + next[i] * blend + offset[i]);
                }
                rows.push(base_pitch + level_offset + shape);
                rows.push(0.25 * slope);
                rows.extend_from_slice(&timbre);
                t += 1;
            }
        }
        word_frames.push(total);
    }
    for v in rows.iter_mut() {
        if noise_std > 0.0 {
            *v += noise.sample(rng);
        }
        *v = *v as f32 as f64;
    }
    let frames = rows.len() / d;
    Synthesis {
        features: Matrix::from_vec(frames, d, rows).expect("rows are whole frames"),
        word_frames,
        piece_frames,
    }
}

/// Fixed scalar-quantization grid mapping feature frames to discrete units.
#[derive(Clone, Debug)]
pub struct UnitGrid {
    design: VoiceDesign,
    pub stride: usize,
    pub phone_bins: usize,
    pub pitch_bins: usize,
}

const PHONE_RANGE: f64 = 1.2;
const PITCH_RANGE: f64 = 1.0;

impl UnitGrid {
    pub fn new(feature_dim: usize, stride: usize, phone_bins: usize, pitch_bins: usize) -> Self {
        Self {
            design: VoiceDesign::new(feature_dim),
            stride: stride.max(1),
            phone_bins: phone_bins.max(1),
            pitch_bins: pitch_bins.max(1),
        }
    }

    pub fn num_units(&self) -> usize {
        self.phone_bins * self.pitch_bins
    }

    pub fn num_positions(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }

    fn bin(x: f64, range: f64, bins: usize) -> usize {
        let u = (x + range) / (2.0 * range) * bins as f64;
        (libm::floor(u).max(0.0) as usize).min(bins - 1)
    }

    /// One unit per `stride` frames (the last group may be shorter).
    pub fn units(&self, features: &Matrix) -> Vec<usize> {
        let d = self.design.dim;
        assert_eq!(features.cols(), d, "feature width");
        let phon = d - 4;
        let mut out = Vec::with_capacity(self.num_positions(features.rows()));
        let mut start = 0;
        while start < features.rows() {
            let end = (start + self.stride).min(features.rows());
            let n = (end - start) as f64;
            let mut proj = 0.0;
            let mut pitch = 0.0;
            for t in start..end {
                let row = features.row(t);
                proj += row[..phon].iter().zip(&self.design.projection).map(|(a, b)| a * b).sum::<f64>();
                pitch += row[phon];
            }
            let b1 = Self::bin(proj / n, PHONE_RANGE, self.phone_bins);
            let b2 = Self::bin(pitch / n, PITCH_RANGE, self.pitch_bins);
            out.push(b1 * self.pitch_bins + b2);
            start = end;
        }
        out
    }
}
