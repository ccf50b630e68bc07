//! Unit decoder: a prefix-conditioned causal transformer over target units,
//! conditioned on a speaker row and the fused text/speech sequence.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::corpus::UnitSequence;
use crate::error::{bail, Result};
use crate::graph::{Graph, Mask, Var};
use crate::nn::{sinusoidal_positions, Embedding, LayerNorm, Linear, TransformerBlock, NORM_EPS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{argmax, softmax_rows, standardize_rows, Matrix};

/// `softmax([w_sp, w_txt])`.
pub fn fusion_probabilities(w_sp: f64, w_txt: f64) -> (f64, f64) {
    let m = w_sp.max(w_txt);
    let (a, b) = (libm::exp(w_sp - m), libm::exp(w_txt - m));
    (a / (a + b), b / (a + b))
}

/// `p_sp·normalize(taste) + p_txt·normalize(text)` with per-row
/// standardization.
pub fn fuse(taste: &Matrix, text: &Matrix, w_sp: f64, w_txt: f64) -> Result<Matrix> {
    if taste.shape() != text.shape() || taste.rows() == 0 {
        bail!(Argument, "cannot fuse {:?} with {:?}", taste.shape(), text.shape());
    }
    let (p_sp, p_txt) = fusion_probabilities(w_sp, w_txt);
    let (a, _) = standardize_rows(taste, NORM_EPS);
    let (b, _) = standardize_rows(text, NORM_EPS);
    let data = a.data().iter().zip(b.data()).map(|(x, y)| p_sp * x + p_txt * y).collect();
    Matrix::from_vec(taste.rows(), taste.cols(), data)
}

/// The two learnable fusion scalars, stored as one `1 × 2` parameter.
#[derive(Clone, Copy, Debug)]
pub struct FusionWeights {
    pub param: ParamId,
}

impl FusionWeights {
    pub fn new(store: &mut ParamStore, name: &str, w_sp: f64, w_txt: f64) -> Self {
        let param = store.add(format!("{name}.fusion"), Matrix::from_vec(1, 2, vec![w_sp, w_txt]).expect("1x2"));
        Self { param }
    }

    pub fn values(&self, store: &ParamStore) -> (f64, f64) {
        let m = store.get(self.param);
        (m.get(0, 0), m.get(0, 1))
    }

    pub fn probabilities(&self, store: &ParamStore) -> (f64, f64) {
        let (a, b) = self.values(store);
        fusion_probabilities(a, b)
    }

    /// `(p_sp, p_txt)` as `1 × 1` graph nodes.
    pub fn probability_vars(&self, g: &mut Graph) -> Result<(Var, Var)> {
        let w = g.param(self.param);
        let p = g.softmax(w, Mask::Full);
        Ok((g.slice_cols(p, 0..1)?, g.slice_cols(p, 1..2)?))
    }

    /// Fused rows in the graph. With `text_only` the probabilities are fixed
    /// at `(0, 1)` and the speech rows are multiplied by zero.
    pub fn fuse(&self, g: &mut Graph, taste: Option<Var>, text: Var, text_only: bool) -> Result<Var> {
        let v = g.standardize(text, NORM_EPS);
        match (taste, text_only) {
            (None, true) => Ok(v),
            (None, false) => bail!(Argument, "speech rows are required unless the text-only flag is set"),
            (Some(z), _) => {
                if g.shape(z) != g.shape(text) {
                    bail!(Argument, "cannot fuse {:?} with {:?}", g.shape(z), g.shape(text));
                }
                let z = g.standardize(z, NORM_EPS);
                if text_only {
                    let z = g.scale(z, 0.0);
                    return g.add(z, v);
                }
                let (p_sp, p_txt) = self.probability_vars(g)?;
                let a = g.scale_by(z, p_sp)?;
                let b = g.scale_by(v, p_txt)?;
                g.add(a, b)
            }
        }
    }
}

/// Learned speaker lookup.
#[derive(Clone, Debug)]
pub struct SpeakerTable {
    pub embedding: Embedding,
}

impl SpeakerTable {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, speakers: usize, dim: usize) -> Self {
        Self {
            embedding: Embedding::new(store, rng, &format!("{name}.speakers"), speakers, dim),
        }
    }

    pub fn num_speakers(&self) -> usize {
        self.embedding.size
    }

    pub fn lookup(&self, g: &mut Graph, speaker: usize) -> Result<Var> {
        if speaker >= self.num_speakers() {
            bail!(Argument, "unknown speaker {} (table has {})", speaker, self.num_speakers());
        }
        self.embedding.forward(g, &[speaker])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub speaker_dim: usize,
    pub embed_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 64,
            heads: 4,
            ff_hidden: 128,
            speaker_dim: 16,
            embed_dim: 32,
        }
    }
}

/// What the decoder is conditioned on.
#[derive(Clone, Copy, Debug)]
pub struct Condition<'a> {
    /// Speech rows aligned with `text_tokens` (`[K × d_z]`).
    pub taste: Option<Var>,
    pub text_tokens: &'a [usize],
    /// Frame-rate speech rows (`[T × d_z]`), appended after the text rows.
    pub frames: Option<Var>,
    pub speaker: usize,
    pub text_only: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub sampling: Sampling,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            sampling: Sampling::Greedy,
            max_len: 200,
        }
    }
}

const SEG_SPEAKER: usize = 0;
const SEG_TEXT: usize = 1;
const SEG_FRAMES: usize = 2;
const SEG_UNITS: usize = 3;

#[derive(Clone, Debug)]
pub struct UnitDecoder {
    pub config: DecoderConfig,
    pub num_units: usize,
    pub text_embed: Embedding,
    pub speakers: SpeakerTable,
    pub fusion: FusionWeights,
    pub speaker_proj: Linear,
    pub cond_proj: Linear,
    pub segments: ParamId,
    pub unit_embed: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl UnitDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: DecoderConfig,
        text_vocab: usize,
        num_units: usize,
        num_speakers: usize,
    ) -> Result<Self> {
        if num_units == 0 || num_speakers == 0 || config.layers == 0 {
            bail!(Config, "decoder needs units, speakers and at least one layer");
        }
        let w = config.width;
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(store, rng, &format!("decoder.block{i}"), w, config.heads, config.ff_hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            text_embed: Embedding::new(store, rng, "decoder.text_embed", text_vocab, config.embed_dim),
            speakers: SpeakerTable::new(store, rng, "decoder", num_speakers, config.speaker_dim),
            fusion: FusionWeights::new(store, "decoder", 0.0, 0.0),
            speaker_proj: Linear::new(store, rng, "decoder.speaker_proj", config.speaker_dim, w, true),
            cond_proj: Linear::new(store, rng, "decoder.cond_proj", config.embed_dim, w, true),
            segments: store.add_normal("decoder.segments", 4, w, 0.1, rng),
            unit_embed: Embedding::new(store, rng, "decoder.unit_embed", num_units + 2, w),
            blocks,
            final_norm: LayerNorm::new(store, "decoder.final_norm", w),
            head: Linear::new(store, rng, "decoder.head", w, num_units + 1, true),
            num_units,
            config,
        })
    }

    /// End-of-units class index.
    pub fn eos(&self) -> usize {
        self.num_units
    }

    /// Start symbol fed before the first unit.
    pub fn bos(&self) -> usize {
        self.num_units + 1
    }

    fn with_segment(&self, g: &mut Graph, rows: Var, segment: usize, positions: bool) -> Result<Var> {
        let table = g.param(self.segments);
        let seg = g.slice_rows(table, segment..segment + 1)?;
        let mut x = g.add_row(rows, seg)?;
        if positions {
            let n = g.shape(rows).0;
            let pos = g.constant(sinusoidal_positions(n, self.config.width, 0));
            x = g.add(x, pos)?;
        }
        Ok(x)
    }

    /// Condition rows: speaker, then fused text rows, then any frame rows.
    pub fn condition(&self, g: &mut Graph, cond: &Condition) -> Result<Var> {
        if cond.text_tokens.is_empty() {
            bail!(Argument, "decoder condition needs at least one text token");
        }
        let spk = self.speakers.lookup(g, cond.speaker)?;
        let spk = self.speaker_proj.forward(g, spk)?;
        let spk = self.with_segment(g, spk, SEG_SPEAKER, false)?;
        let v = self.text_embed.forward(g, cond.text_tokens)?;
        let mut parts = vec![spk];
        match cond.frames {
            None => {
                if let Some(z) = cond.taste {
                    if g.shape(z).0 != cond.text_tokens.len() {
                        bail!(
                            Argument,
                            "{} speech rows for {} text tokens",
                            g.shape(z).0,
                            cond.text_tokens.len()
                        );
                    }
                }
                let fused = self.fusion.fuse(g, cond.taste, v, cond.text_only)?;
                let rows = self.cond_proj.forward(g, fused)?;
                parts.push(self.with_segment(g, rows, SEG_TEXT, true)?);
            }
            Some(frames) => {
                let (p_sp, p_txt) = self.fusion.probability_vars(g)?;
                let tv = g.standardize(v, NORM_EPS);
                let tv = g.scale_by(tv, p_txt)?;
                let rows = self.cond_proj.forward(g, tv)?;
                parts.push(self.with_segment(g, rows, SEG_TEXT, true)?);
                let fv = g.standardize(frames, NORM_EPS);
                let fv = g.scale_by(fv, p_sp)?;
                let rows = self.cond_proj.forward(g, fv)?;
                parts.push(self.with_segment(g, rows, SEG_FRAMES, true)?);
            }
        }
        g.concat_rows(&parts)
    }

    /// Teacher-forced logits `[len(prefix) + 1 × U + 1]`: row `t` predicts
    /// unit `t` from units `0..t`.
    pub fn forward(&self, g: &mut Graph, cond: &Condition, prefix: &[usize]) -> Result<Var> {
        if let Some(&u) = prefix.iter().find(|&&u| u >= self.num_units) {
            bail!(Argument, "unit {} outside vocabulary of {}", u, self.num_units);
        }
        let c = self.condition(g, cond)?;
        let n = g.shape(c).0;
        let inputs: Vec<usize> = core::iter::once(self.bos()).chain(prefix.iter().copied()).collect();
        let u = self.unit_embed.forward(g, &inputs)?;
        let u = self.with_segment(g, u, SEG_UNITS, true)?;
        let mut x = g.concat_rows(&[c, u])?;
        for block in &self.blocks {
            x = block.forward(g, x, Mask::Prefix(n))?;
        }
        let x = g.slice_rows(x, n..n + inputs.len())?;
        let x = self.final_norm.forward(g, x)?;
        self.head.forward(g, x)
    }

    /// Autoregressive generation from fixed condition matrices. The end
    /// symbol is never chosen at the first step.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        taste: Option<&Matrix>,
        frames: Option<&Matrix>,
        text_tokens: &[usize],
        speaker: usize,
        text_only: bool,
        decode: &DecodeConfig,
        rng: &mut R,
    ) -> Result<UnitSequence> {
        if decode.max_len == 0 {
            bail!(Argument, "maximum generation length must be at least 1");
        }
        if let Sampling::TopK { k, temperature } = decode.sampling {
            if k == 0 || !(temperature > 0.0) {
                bail!(Argument, "top-k sampling needs k ≥ 1 and a positive temperature");
            }
        }
        let mut units = Vec::new();
        while units.len() < decode.max_len {
            let mut g = Graph::with_params(store);
            let cond = Condition {
                taste: taste.map(|m| g.constant(m.clone())),
                text_tokens,
                frames: frames.map(|m| g.constant(m.clone())),
                speaker,
                text_only,
            };
            let logits = self.forward(&mut g, &cond, &units)?;
            let last = g.value(logits).row(units.len()).to_vec();
            let next = pick(&last, self.eos(), units.is_empty(), decode.sampling, rng);
            if next == self.eos() {
                break;
            }
            units.push(next);
        }
        UnitSequence::new(units, self.num_units)
    }
}

/// Chooses the next symbol from `logits`, optionally forbidding `eos`.
pub fn pick<R: Rng + ?Sized>(logits: &[f64], eos: usize, forbid_eos: bool, sampling: Sampling, rng: &mut R) -> usize {
    let mut l = logits.to_vec();
    if forbid_eos && eos < l.len() {
        l[eos] = f64::NEG_INFINITY;
    }
    match sampling {
        Sampling::Greedy => argmax(&l),
        Sampling::TopK { k, temperature } => {
            let keep = crate::tensor::top_k_indices(&l, k.min(l.len()));
            let scaled: Vec<f64> = keep.iter().map(|&i| l[i] / temperature).collect();
            let probs = softmax_rows(&Matrix::from_vec(1, scaled.len(), scaled).expect("row"), |_, _| true);
            let mut t: f64 = rng.random_range(0.0..1.0);
            for (j, &p) in probs.data().iter().enumerate() {
                if t < p {
                    return keep[j];
                }
                t -= p;
            }
            keep[keep.len() - 1]
        }
    }
}
