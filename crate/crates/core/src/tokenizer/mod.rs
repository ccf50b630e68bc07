//! Text-aligned speech tokenizer: frozen encoder, cross-attention
//! aggregator, residual quantizer and the unit decoder used to train them.

mod aggregator;
mod encoder;
mod quantizer;

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use aggregator::{Aggregated, Aggregator, AggregatorConfig, AggregatorLayer};
pub use encoder::{frame_labels, frame_units, Encoder, EncoderConfig, EncoderStates, ENCODER_PREFIX};
pub use quantizer::{kmeans, nearest_code, QuantizerState, TasteCodes};

use crate::align::{expand_words_var, word_average, word_average_var, WordGroups};
use crate::decoder::{Condition, DecodeConfig, DecoderConfig, UnitDecoder};
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{reconstruction_ce, rvq_commitment};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{top_k_indices, Matrix};
use crate::corpus::UnitSequence;

/// Module ablations sharing one code path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Frame-rate encoder states, no aggregation.
    Enc,
    EncAgg,
    EncAggQuan,
    /// Frame-rate last-layer states.
    EncLast,
    /// Aggregation with last-layer values.
    EncAggLast,
    /// No speech rows at all.
    TextOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Enc,
        Variant::EncAgg,
        Variant::EncAggQuan,
        Variant::EncLast,
        Variant::EncAggLast,
        Variant::TextOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Enc => "enc",
            Variant::EncAgg => "enc+agg",
            Variant::EncAggQuan => "enc+agg+quan",
            Variant::EncLast => "enc-last",
            Variant::EncAggLast => "enc+agg-last",
            Variant::TextOnly => "text-only",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let n = name.trim().to_ascii_lowercase();
        match n.as_str() {
            "enc-only" => return Ok(Variant::Enc),
            "full" => return Ok(Variant::EncAggQuan),
            _ => {}
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == n)
            .ok_or_else(|| Error::Config(alloc::format!("unknown variant `{name}`")))
    }

    pub fn aggregates(self) -> bool {
        matches!(self, Variant::EncAgg | Variant::EncAggQuan | Variant::EncAggLast)
    }

    pub fn quantizes(self) -> bool {
        self == Variant::EncAggQuan
    }

    pub fn uses_last_layer_values(self) -> bool {
        matches!(self, Variant::EncLast | Variant::EncAggLast)
    }

    pub fn uses_speech(self) -> bool {
        self != Variant::TextOnly
    }

    pub fn frame_rate(self) -> bool {
        matches!(self, Variant::Enc | Variant::EncLast)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerConfig {
    pub layers: usize,
    pub codebook_size: usize,
    pub decay: f64,
    pub kmeans_iterations: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            codebook_size: 64,
            decay: 0.99,
            kmeans_iterations: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TasteConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub aggregator: AggregatorConfig,
    pub quantizer: QuantizerConfig,
    pub decoder: DecoderConfig,
    /// Average aggregator rows within each word before quantizing.
    pub word_average: bool,
    pub token_vocab: usize,
    pub num_units: usize,
    pub num_speakers: usize,
    pub unit_stride: usize,
}

impl TasteConfig {
    pub fn new(token_vocab: usize, num_units: usize, num_speakers: usize) -> Self {
        Self {
            variant: Variant::EncAggQuan,
            encoder: EncoderConfig::default(),
            aggregator: AggregatorConfig::default(),
            quantizer: QuantizerConfig::default(),
            decoder: DecoderConfig::default(),
            word_average: true,
            token_vocab,
            num_units,
            num_speakers,
            unit_stride: 4,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.aggregator.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder.embed_dim != self.aggregator.embed_dim {
            bail!(
                Config,
                "decoder embedding width {} differs from aggregator output {}",
                self.decoder.embed_dim,
                self.aggregator.embed_dim
            );
        }
        if self.token_vocab == 0 || self.num_units == 0 || self.num_speakers == 0 || self.unit_stride == 0 {
            bail!(Config, "vocabulary, unit, speaker and stride sizes must be positive");
        }
        Ok(())
    }
}

/// One training or evaluation pair with precomputed encoder states.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub states: &'a EncoderStates,
    pub tokens: &'a [usize],
    pub groups: &'a WordGroups,
    pub speaker: usize,
    pub units: &'a [usize],
}

/// Speech-side rows feeding the decoder.
pub struct SpeechRows {
    /// Aggregator output before any averaging or quantization.
    pub z: Option<Var>,
    /// The rows that are (or would be) quantized: `z`, or its word means.
    pub pre_quant: Option<Var>,
    /// Token-aligned rows given to the decoder.
    pub taste: Option<Var>,
    pub frames: Option<Var>,
    pub codes: Option<TasteCodes>,
    pub commitment: Option<Var>,
}

/// Per-example losses and the decoder logits.
pub struct StepOutput {
    pub total: Var,
    pub ce: Var,
    pub rvq: Option<Var>,
    pub logits: Var,
    pub speech: SpeechRows,
}

/// Codes of one utterance at token and word granularity.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenization {
    pub z: Matrix,
    pub token_codes: TasteCodes,
    pub word_codes: TasteCodes,
}

#[derive(Clone, Debug)]
pub struct TasteModel {
    pub config: TasteConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub aggregator: Option<Aggregator>,
    pub frame_proj: Option<Linear>,
    pub quantizer: QuantizerState,
    pub decoder: UnitDecoder,
}

impl TasteModel {
    pub fn new(config: TasteConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        // Separate streams so every variant shares the same encoder draw.
        let mut enc_rng = ChaCha8Rng::seed_from_u64(seed);
        enc_rng.set_stream(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let encoder = Encoder::new(&mut store, &mut enc_rng, config.encoder, config.token_vocab, config.num_units)?;
        let d_h = config.encoder.width;
        let v = config.variant;
        let aggregator = v
            .aggregates()
            .then(|| Aggregator::new(&mut store, &mut rng, config.aggregator, config.token_vocab, d_h))
            .transpose()?;
        let frame_proj = v
            .frame_rate()
            .then(|| Linear::new(&mut store, &mut rng, "frame_proj", d_h, config.embed_dim(), true));
        let decoder = UnitDecoder::new(
            &mut store,
            &mut rng,
            config.decoder,
            config.token_vocab,
            config.num_units,
            config.num_speakers,
        )?;
        let q = config.quantizer;
        let quantizer = QuantizerState::new(q.layers, q.codebook_size, config.embed_dim(), q.decay)?;
        Ok(Self {
            config,
            store,
            encoder,
            aggregator,
            frame_proj,
            quantizer,
            decoder,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Freezes the encoder so no gradient reaches it.
    pub fn freeze_encoder(&mut self) {
        self.store.set_trainable_prefix(ENCODER_PREFIX, false);
    }

    /// Copies the encoder weights of another model with the same encoder
    /// shape, then freezes them.
    pub fn load_encoder(&mut self, other: &ParamStore) -> Result<()> {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with(ENCODER_PREFIX))
            .map(|(_, n, _)| String::from(n))
            .collect();
        for name in names {
            let id = other
                .find(&name)
                .ok_or_else(|| Error::Config(alloc::format!("source model lacks `{name}`")))?;
            self.store.assign(&name, other.get(id).clone())?;
        }
        self.freeze_encoder();
        Ok(())
    }

    pub fn encode(&self, features: &Matrix) -> Result<EncoderStates> {
        self.encoder.encode(&self.store, features)
    }

    fn values<'a>(&self, states: &'a EncoderStates) -> &'a Matrix {
        if self.variant().uses_last_layer_values() {
            &states.h_last
        } else {
            &states.h_shallow
        }
    }

    /// Aggregator output `[N × d_z]` for one utterance.
    pub fn aggregate_var(&self, g: &mut Graph, states: &EncoderStates, tokens: &[usize]) -> Result<Aggregated> {
        let agg = self
            .aggregator
            .as_ref()
            .ok_or_else(|| Error::Config(alloc::format!("variant {} has no aggregator", self.variant().name())))?;
        let text = agg.embed_text(g, tokens)?;
        let keys = g.constant(states.h_last.clone());
        let values = g.constant(self.values(states).clone());
        agg.forward(g, text, keys, values)
    }

    /// Speech rows for the decoder. When `quantize` is false (warmup, or a
    /// variant without quantizer) the rows pass through unchanged.
    pub fn speech_rows(
        &self,
        g: &mut Graph,
        states: &EncoderStates,
        tokens: &[usize],
        groups: &WordGroups,
        quantize: bool,
    ) -> Result<SpeechRows> {
        let v = self.variant();
        let mut out = SpeechRows {
            z: None,
            pre_quant: None,
            taste: None,
            frames: None,
            codes: None,
            commitment: None,
        };
        if !v.uses_speech() {
            return Ok(out);
        }
        if v.frame_rate() {
            let proj = self.frame_proj.as_ref().expect("frame variants build a projection");
            let x = g.constant(self.values(states).clone());
            out.frames = Some(proj.forward(g, x)?);
            return Ok(out);
        }
        if groups.total() != tokens.len() {
            bail!(Argument, "word groups cover {} tokens, text has {}", groups.total(), tokens.len());
        }
        let z = self.aggregate_var(g, states, tokens)?.z;
        out.z = Some(z);
        let pre = if self.config.word_average { word_average_var(g, z, groups)? } else { z };
        out.pre_quant = Some(pre);
        let mut rows = pre;
        if quantize && v.quantizes() {
            let pre_value = g.value(pre).clone();
            let codes = self.quantizer.quantize(&pre_value)?;
            // residual r = pre − Σ_{s<r} codeword_s, differentiable in `pre`
            let mut residuals = Vec::with_capacity(codes.selected.len());
            let mut selected = Vec::with_capacity(codes.selected.len());
            let mut acc = Matrix::zeros(codes.embedding.rows(), codes.embedding.cols());
            for sel in &codes.selected {
                let shift = g.constant(acc.clone());
                residuals.push(g.sub(pre, shift)?);
                selected.push(g.constant(sel.clone()));
                acc.add_assign(sel);
            }
            out.commitment = Some(rvq_commitment(g, &residuals, &selected)?);
            rows = g.pass_through(pre, codes.embedding.clone())?;
            out.codes = Some(codes);
        }
        out.taste = Some(if self.config.word_average { expand_words_var(g, rows, groups)? } else { rows });
        Ok(out)
    }

    /// Decoder logits given explicit speech rows.
    pub fn decode_logits(&self, g: &mut Graph, speech: &SpeechRows, ex: &Example) -> Result<Var> {
        let cond = Condition {
            taste: speech.taste,
            text_tokens: ex.tokens,
            frames: speech.frames,
            speaker: ex.speaker,
            text_only: !self.variant().uses_speech(),
        };
        self.decoder.forward(g, &cond, ex.units)
    }

    /// `L_ce + L_rvq` (the commitment term only while quantizing).
    pub fn step(&self, g: &mut Graph, ex: &Example, quantize: bool) -> Result<StepOutput> {
        let speech = self.speech_rows(g, ex.states, ex.tokens, ex.groups, quantize)?;
        let logits = self.decode_logits(g, &speech, ex)?;
        let ce = reconstruction_ce(g, logits, ex.units)?;
        let (total, rvq) = match speech.commitment {
            Some(c) => (g.add(ce, c)?, Some(c)),
            None => (ce, None),
        };
        Ok(StepOutput {
            total,
            ce,
            rvq,
            logits,
            speech,
        })
    }

    /// Whether the quantizer participates in forward passes right now.
    pub fn quantizing(&self) -> bool {
        self.variant().quantizes() && self.quantizer.enabled
    }

    /// Teacher-forced logits for evaluation.
    pub fn unit_logits(&self, ex: &Example) -> Result<Matrix> {
        let mut g = Graph::with_params(&self.store);
        let out = self.step(&mut g, ex, self.quantizing())?;
        Ok(g.value(out.logits).clone())
    }

    /// Codes at token and word granularity.
    pub fn tokenize(&self, states: &EncoderStates, tokens: &[usize], groups: &WordGroups) -> Result<Tokenization> {
        if tokens.is_empty() {
            bail!(Argument, "cannot tokenize an empty transcription");
        }
        let mut g = Graph::with_params(&self.store);
        let zv = self.aggregate_var(&mut g, states, tokens)?.z;
        let z = g.value(zv).clone();
        let token_codes = self.quantizer.quantize(&z)?;
        let word_codes = self.quantizer.quantize(&word_average(&z, groups)?)?;
        Ok(Tokenization {
            z,
            token_codes,
            word_codes,
        })
    }

    /// Decoder rows rebuilt from word-level codes.
    pub fn rows_from_word_codes(&self, codes: &crate::codes::CodeGrid, groups: &WordGroups) -> Result<Matrix> {
        let words = self.quantizer.dequantize(codes)?;
        if self.config.word_average {
            if words.rows() != groups.len() {
                bail!(Argument, "{} code columns for {} words", words.rows(), groups.len());
            }
            Ok(words.select_rows(&groups.word_of_position()))
        } else {
            Ok(words)
        }
    }

    /// Free-running unit generation from decoder rows.
    pub fn generate(
        &self,
        taste: Option<&Matrix>,
        frames: Option<&Matrix>,
        tokens: &[usize],
        speaker: usize,
        decode: &DecodeConfig,
        seed: u64,
    ) -> Result<UnitSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.decoder.generate(
            &self.store,
            taste,
            frames,
            tokens,
            speaker,
            !self.variant().uses_speech(),
            decode,
            &mut rng,
        )
    }

    /// Seeds the first aggregator layer from the frozen encoder's pretext
    /// token head so that each text query starts out matching the frames
    /// that head assigns to its token. Query rows become the head's class
    /// weights scaled by `gain`; every attention head projects queries and
    /// keys onto the leading singular directions of those weights. A no-op
    /// without an aggregator or when the widths differ.
    pub fn align_aggregator_queries(&mut self, gain: f64) -> Result<()> {
        let Some(agg) = self.aggregator.as_ref() else {
            return Ok(());
        };
        let head = self.store.get(self.encoder.token_head.weight).clone();
        let w = agg.config.width;
        if head.rows() != w {
            return Ok(());
        }
        let layer = &agg.layers[0].attn;
        let hd = w / layer.heads;
        let basis = leading_subspace(&head, hd)?;
        let mut table = head.transpose();
        table.scale_assign(gain);
        let mut wq = Matrix::zeros(w, w);
        let mut wk = Matrix::zeros(w, w);
        for h in 0..layer.heads {
            for i in 0..w {
                for j in 0..hd {
                    wq.set(i, h * hd + j, basis.get(i, j));
                    wk.set(i, h * hd + j, basis.get(i, j));
                }
            }
        }
        let (qe, qw, kw) = (agg.query_embed.table, layer.query.weight, layer.key.weight);
        let (qb, kb) = (layer.query.bias, layer.key.bias);
        *self.store.get_mut(qe) = table;
        *self.store.get_mut(qw) = wq;
        *self.store.get_mut(kw) = wk;
        for b in [qb, kb].into_iter().flatten() {
            let m = self.store.get_mut(b);
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        Ok(())
    }

    /// Checkpoint names of the quantizer codebooks.
    pub fn codebook_names(&self) -> Vec<String> {
        (0..self.quantizer.num_layers())
            .map(|r| alloc::format!("quantizer.codebook{r}"))
            .collect()
    }
}

/// Orthonormal `[rows × k]` basis of the top-`k` left singular subspace of
/// `m`, by subspace iteration on `m mᵀ`.
fn leading_subspace(m: &Matrix, k: usize) -> Result<Matrix> {
    let n = m.rows();
    if k == 0 || k > n {
        bail!(Argument, "cannot take {} directions of a {}-row matrix", k, n);
    }
    let gram = m.matmul(&m.transpose())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut q = crate::check::random_matrix(&mut rng, n, k);
    orthonormalize_cols(&mut q);
    for _ in 0..200 {
        q = gram.matmul(&q)?;
        orthonormalize_cols(&mut q);
    }
    Ok(q)
}

fn orthonormalize_cols(q: &mut Matrix) {
    let (n, k) = q.shape();
    for j in 0..k {
        for p in 0..j {
            let dot: f64 = (0..n).map(|i| q.get(i, j) * q.get(i, p)).sum();
            for i in 0..n {
                q.set(i, j, q.get(i, j) - dot * q.get(i, p));
            }
        }
        let norm = libm::sqrt((0..n).map(|i| q.get(i, j) * q.get(i, j)).sum::<f64>());
        let norm = if norm > 1e-300 { norm } else { 1.0 };
        for i in 0..n {
            q.set(i, j, q.get(i, j) / norm);
        }
    }
}

/// Top-1 and top-5 hits over the unit rows of teacher-forced logits.
pub fn unit_accuracy(logits: &Matrix, units: &[usize]) -> (usize, usize, usize) {
    let mut top1 = 0;
    let mut top5 = 0;
    for (i, &u) in units.iter().enumerate() {
        let best = top_k_indices(logits.row(i), 5);
        if best[0] == u {
            top1 += 1;
        }
        if best.contains(&u) {
            top5 += 1;
        }
    }
    (top1, top5, units.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::random_matrix;

    fn tiny(variant: Variant) -> TasteModel {
        let mut cfg = TasteConfig::new(12, 8, 3);
        cfg.variant = variant;
        cfg.encoder = EncoderConfig {
            feature_dim: 6,
            layers: 2,
            width: 8,
            heads: 2,
            ff_hidden: 16,
            shallow_layer: 1,
        };
        cfg.aggregator = AggregatorConfig {
            layers: 1,
            heads: 2,
            width: 8,
            ff_hidden: 16,
            embed_dim: 4,
        };
        cfg.decoder = DecoderConfig {
            layers: 1,
            width: 8,
            heads: 2,
            ff_hidden: 16,
            speaker_dim: 4,
            embed_dim: 4,
        };
        cfg.quantizer.layers = 2;
        cfg.quantizer.codebook_size = 4;
        TasteModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn every_variant_runs_and_encoder_draw_is_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let features = random_matrix(&mut rng, 9, 6);
        let groups = WordGroups::from_lengths(&[2, 1]).unwrap();
        let mut encoders = Vec::new();
        for v in Variant::ALL {
            let mut m = tiny(v);
            m.freeze_encoder();
            let states = m.encode(&features).unwrap();
            encoders.push(states.h_last.clone());
            let ex = Example {
                states: &states,
                tokens: &[1, 2, 3],
                groups: &groups,
                speaker: 1,
                units: &[0, 1, 2, 3, 4],
            };
            let mut g = Graph::with_params(&m.store);
            let out = m.step(&mut g, &ex, false).unwrap();
            assert_eq!(g.shape(out.logits), (6, 9));
            assert!(g.value(out.total).item().is_finite());
        }
        assert!(encoders.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn tokenization_shapes() {
        let mut m = tiny(Variant::EncAggQuan);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let features = random_matrix(&mut rng, 12, 6);
        let states = m.encode(&features).unwrap();
        let tokens = [1, 2, 3, 4, 5];
        let groups = WordGroups::from_lengths(&[2, 1, 2]).unwrap();
        assert_eq!(
            m.tokenize(&states, &tokens, &groups).unwrap_err(),
            Error::QuantizerDisabled
        );
        let mut g = Graph::with_params(&m.store);
        let z = m.aggregate_var(&mut g, &states, &tokens).unwrap().z;
        let sample = g.value(z).clone();
        m.quantizer.init_kmeans(&sample, 3, &mut rng).unwrap();
        let t = m.tokenize(&states, &tokens, &groups).unwrap();
        assert_eq!((t.token_codes.codes.num_layers(), t.token_codes.codes.len()), (2, 5));
        assert_eq!(t.word_codes.codes.len(), 3);
        assert!(matches!(m.tokenize(&states, &[], &groups), Err(Error::Argument(_))));
        let ex = Example {
            states: &states,
            tokens: &tokens,
            groups: &groups,
            speaker: 0,
            units: &[1, 2, 3],
        };
        let mut g = Graph::with_params(&m.store);
        let out = m.step(&mut g, &ex, true).unwrap();
        assert!(out.rvq.is_some());
        let rows = m.rows_from_word_codes(&t.word_codes.codes, &groups).unwrap();
        assert_eq!(g.value(out.speech.taste.unwrap()), &rows);
    }

    #[test]
    fn query_alignment_copies_the_token_head() {
        let mut m = tiny(Variant::EncAgg);
        m.align_aggregator_queries(3.0).unwrap();
        let head = m.store.get(m.encoder.token_head.weight).clone();
        let agg = m.aggregator.as_ref().unwrap();
        let table = m.store.get(agg.query_embed.table);
        for t in 0..head.cols() {
            for i in 0..head.rows() {
                assert_eq!(table.get(t, i), 3.0 * head.get(i, t));
            }
        }
        let attn = &agg.layers[0].attn;
        let wq = m.store.get(attn.query.weight);
        assert_eq!(wq, m.store.get(attn.key.weight));
        let hd = agg.config.width / attn.heads;
        for h in 0..attn.heads {
            for a in 0..hd {
                for b in 0..hd {
                    let dot: f64 = (0..wq.rows()).map(|i| wq.get(i, h * hd + a) * wq.get(i, h * hd + b)).sum();
                    assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-9);
                }
            }
        }
        for b in [attn.query.bias, attn.key.bias].into_iter().flatten() {
            assert!(m.store.get(b).data().iter().all(|&v| v == 0.0));
        }

        let mut plain = tiny(Variant::Enc);
        let before = plain.store.clone();
        plain.align_aggregator_queries(3.0).unwrap();
        assert!(plain.store.iter().zip(before.iter()).all(|(a, b)| a.2 == b.2));
    }

    #[test]
    fn leading_subspace_finds_dominant_directions() {
        let m = Matrix::from_rows(&[[0.0, 0.0, 0.1], [3.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        let q = leading_subspace(&m, 2).unwrap();
        // rows 1 and 3 carry the two largest singular values
        for (i, expect) in [(0, 0.0), (1, 1.0), (2, 0.0), (3, 1.0)] {
            let energy: f64 = (0..2).map(|j| q.get(i, j) * q.get(i, j)).sum();
            assert!((energy - expect).abs() < 1e-6, "row {i}: {energy}");
        }
        assert!(leading_subspace(&m, 5).is_err());
    }

    #[test]
    fn accuracy_counts() {
        let logits = Matrix::from_rows(&[[0.0, 5.0, 1.0, 0.0, 0.0, 0.0, 0.0], [3.0, 2.0, 1.0, 0.5, 0.4, 0.3, 0.2]]).unwrap();
        assert_eq!(unit_accuracy(&logits, &[1, 6]), (1, 1, 2));
    }
}
