//! Joint text-speech language models over word-aligned speech streams.
//!
//! A causal text LM is pre-trained on text alone, then adapted with
//! low-rank deltas. Each input position carries one text token and the
//! speech of that token's word, fused by a learned weighted sum. Token mode
//! predicts the next text token and `R` codes; embedding mode predicts the
//! next text token and a Gaussian over the next latent row.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::align::{align_codes, align_to_llm, word_average};
use crate::codes::CodeGrid;
use crate::corpus::Transcription;
use crate::decoder::{pick, FusionWeights, Sampling};
use crate::error::{bail, Result};
use crate::graph::{Graph, Mask, Var};
use crate::losses::{emb_lm_loss, gaussian_log_density, sample_latent, token_lm_loss, LatentPrediction, TrainConfig};
use crate::nn::{sinusoidal_positions, Embedding, LayerNorm, Linear, TransformerBlock, NORM_EPS};
use crate::params::ParamStore;
use crate::tensor::{log_softmax_rows, Matrix};
use crate::tokenizer::TasteModel;
use crate::train::{run_epochs, Observer, Schedule};

pub const BASE_PREFIX: &str = "lm.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LmConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_hidden: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            ff_hidden: 256,
        }
    }
}

/// Causal transformer over text tokens. Inputs use the text vocabulary plus
/// end and start symbols; outputs cover the vocabulary plus the end symbol.
#[derive(Clone, Debug)]
pub struct BaseLm {
    pub config: LmConfig,
    pub vocab: usize,
    pub embed: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl BaseLm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: LmConfig, vocab: usize) -> Result<Self> {
        if vocab == 0 || config.layers == 0 {
            bail!(Config, "language model needs a vocabulary and at least one layer");
        }
        if config.heads == 0 || config.width % config.heads != 0 {
            bail!(Config, "{} heads do not divide width {}", config.heads, config.width);
        }
        let w = config.width;
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(store, rng, &format!("lm.block{i}"), w, config.heads, config.ff_hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: Embedding::new(store, rng, "lm.embed", vocab + 2, w),
            blocks,
            final_norm: LayerNorm::new(store, "lm.final_norm", w),
            head: Linear::new(store, rng, "lm.head", w, vocab + 1, true),
            config,
            vocab,
        })
    }

    pub fn eos(&self) -> usize {
        self.vocab
    }

    pub fn bos(&self) -> usize {
        self.vocab + 1
    }

    /// Standardized token embeddings.
    pub fn token_rows(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let e = self.embed.forward(g, tokens)?;
        Ok(g.standardize(e, NORM_EPS))
    }

    /// Final hidden states and text logits.
    pub fn hidden_and_logits(&self, g: &mut Graph, rows: Var) -> Result<(Var, Var)> {
        let n = g.shape(rows).0;
        let pos = g.constant(sinusoidal_positions(n, self.config.width, 0));
        let mut x = g.add(rows, pos)?;
        for block in &self.blocks {
            x = block.forward(g, x, Mask::Causal)?;
        }
        let h = self.final_norm.forward(g, x)?;
        let logits = self.head.forward(g, h)?;
        Ok((h, logits))
    }

    pub fn attach_adapters<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, rng: &mut R, rank: usize, alpha: f64) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.attach_adapters(store, rng, &format!("lm.block{i}"), rank, alpha);
        }
    }
}

/// The text-only base model.
#[derive(Clone, Debug)]
pub struct TextLm {
    pub config: LmConfig,
    pub store: ParamStore,
    pub lm: BaseLm,
}

impl TextLm {
    pub fn new(config: LmConfig, vocab: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let lm = BaseLm::new(&mut store, &mut rng, config, vocab)?;
        Ok(Self { config, store, lm })
    }

    fn inputs(&self, tokens: &[usize]) -> Vec<usize> {
        core::iter::once(self.lm.bos()).chain(tokens.iter().copied()).collect()
    }

    /// Logits `[len + 1 × V + 1]` for `BOS, tokens…`.
    pub fn logits_var(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        check_text(tokens, self.lm.vocab)?;
        let rows = self.lm.token_rows(g, &self.inputs(tokens))?;
        Ok(self.lm.hidden_and_logits(g, rows)?.1)
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut g = Graph::with_params(&self.store);
        let l = self.logits_var(&mut g, tokens)?;
        Ok(g.value(l).clone())
    }

    /// Mean next-token cross-entropy including the end symbol.
    pub fn loss(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let logits = self.logits_var(g, tokens)?;
        let targets = text_targets(tokens, self.lm.eos());
        let n = targets.len() as f64;
        g.cross_entropy(logits, targets.into_iter().map(Some).collect(), n)
    }

    /// `Σ log p(tokens)`, without the end symbol.
    pub fn score(&self, tokens: &[usize]) -> Result<f64> {
        if tokens.is_empty() {
            bail!(Argument, "cannot score an empty sequence");
        }
        let lp = log_softmax_rows(&self.logits(tokens)?);
        Ok(tokens.iter().enumerate().map(|(i, &t)| lp.get(i, t)).sum())
    }
}

fn check_text(tokens: &[usize], vocab: usize) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
        bail!(Argument, "text token {} outside vocabulary of {}", t, vocab);
    }
    Ok(())
}

fn text_targets(tokens: &[usize], eos: usize) -> Vec<usize> {
    tokens.iter().copied().chain(core::iter::once(eos)).collect()
}

/// Pre-trains the base model on tokenized sentences.
pub fn pretrain_text_lm(
    model: &mut TextLm,
    sentences: &[Vec<usize>],
    schedule: &Schedule,
    seed: u64,
    observer: Observer,
) -> Result<Vec<Vec<(String, f64)>>> {
    let count = model.store.len();
    run_epochs(
        model,
        |m| &mut m.store,
        sentences.len(),
        schedule,
        seed,
        "text-lm",
        observer,
        |_, _| Ok(()),
        |m, _, i| {
            let mut g = Graph::with_params(&m.store);
            let loss = m.loss(&mut g, &sentences[i])?;
            let v = g.value(loss).item();
            Ok((g.backward(loss)?.into_params(), vec![(String::from("text"), v)]))
        },
        |_, _| Ok(()),
        count,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlmMode {
    Token,
    Embed,
}

impl SlmMode {
    pub fn name(self) -> &'static str {
        match self {
            SlmMode::Token => "token",
            SlmMode::Embed => "embed",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "token" => Ok(SlmMode::Token),
            "embed" => Ok(SlmMode::Embed),
            _ => bail!(Config, "unknown mode `{}` (expected token or embed)", name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlmConfig {
    pub lm: LmConfig,
    pub mode: SlmMode,
    pub code_layers: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Initial `(w_sp, w_txt)`.
    pub fusion_init: (f64, f64),
}

impl SlmConfig {
    pub fn new(mode: SlmMode, code_layers: usize, codebook_size: usize, latent_dim: usize) -> Self {
        Self {
            lm: LmConfig::default(),
            mode,
            code_layers,
            codebook_size,
            latent_dim,
            lora_rank: 8,
            lora_alpha: 16.0,
            fusion_init: (0.0, 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lora_rank == 0 {
            bail!(Config, "adapter rank must be at least 1");
        }
        if !(self.lora_alpha > 0.0) {
            bail!(Config, "adapter scale must be positive");
        }
        match self.mode {
            SlmMode::Token if self.code_layers == 0 || self.codebook_size == 0 => {
                bail!(Config, "token mode needs at least one code layer and code")
            }
            SlmMode::Embed if self.latent_dim == 0 => bail!(Config, "embedding mode needs a latent width"),
            _ => Ok(()),
        }
    }
}

/// Speech side of a joint sequence, one entry per text token.
#[derive(Clone, Debug, PartialEq)]
pub enum SpeechStream {
    /// `R × M` codes.
    Codes(CodeGrid),
    /// `M × d_z` latent rows.
    Latents(Matrix),
}

impl SpeechStream {
    pub fn len(&self) -> usize {
        match self {
            SpeechStream::Codes(c) => c.len(),
            SpeechStream::Latents(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> SlmMode {
        match self {
            SpeechStream::Codes(_) => SlmMode::Token,
            SpeechStream::Latents(_) => SlmMode::Embed,
        }
    }

    pub fn step(&self, i: usize) -> StepSpeech {
        match self {
            SpeechStream::Codes(c) => StepSpeech::Codes(c.column(i)),
            SpeechStream::Latents(m) => StepSpeech::Latent(m.row(i).to_vec()),
        }
    }

    fn select(&self, positions: &[usize]) -> Self {
        match self {
            SpeechStream::Codes(c) => SpeechStream::Codes(c.select(positions)),
            SpeechStream::Latents(m) => SpeechStream::Latents(m.select_rows(positions)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepSpeech {
    Codes(Vec<usize>),
    Latent(Vec<f64>),
}

/// One generated or observed position.
#[derive(Clone, Debug, PartialEq)]
pub struct JointStep {
    pub text_token: usize,
    pub speech: StepSpeech,
}

/// Text tokens and their aligned speech stream.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSequence {
    pub text: Vec<usize>,
    pub speech: SpeechStream,
}

impl JointSequence {
    pub fn new(text: Vec<usize>, speech: SpeechStream) -> Result<Self> {
        if text.len() != speech.len() {
            bail!(
                Argument,
                "{} text tokens but {} speech positions",
                text.len(),
                speech.len()
            );
        }
        Ok(Self { text, speech })
    }

    pub fn from_steps(steps: &[JointStep]) -> Result<Self> {
        let Some(first) = steps.first() else {
            bail!(Argument, "a joint sequence needs at least one step");
        };
        let text = steps.iter().map(|s| s.text_token).collect();
        let speech = match &first.speech {
            StepSpeech::Codes(c) => {
                let cols = steps
                    .iter()
                    .map(|s| match &s.speech {
                        StepSpeech::Codes(c) => Ok(c.clone()),
                        StepSpeech::Latent(_) => bail!(Argument, "steps mix codes and latents"),
                    })
                    .collect::<Result<Vec<_>>>()?;
                SpeechStream::Codes(CodeGrid::from_columns(c.len(), &cols)?)
            }
            StepSpeech::Latent(_) => {
                let rows = steps
                    .iter()
                    .map(|s| match &s.speech {
                        StepSpeech::Latent(l) => Ok(l.clone()),
                        StepSpeech::Codes(_) => bail!(Argument, "steps mix codes and latents"),
                    })
                    .collect::<Result<Vec<_>>>()?;
                SpeechStream::Latents(Matrix::from_rows(&rows)?)
            }
        };
        Self::new(text, speech)
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn steps(&self) -> Vec<JointStep> {
        (0..self.len())
            .map(|i| JointStep {
                text_token: self.text[i],
                speech: self.speech.step(i),
            })
            .collect()
    }

    /// The first `k` positions.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k > self.len() {
            bail!(Argument, "prefix of {} from a sequence of {}", k, self.len());
        }
        let idx: Vec<usize> = (0..k).collect();
        Ok(Self {
            text: self.text[..k].to_vec(),
            speech: self.speech.select(&idx),
        })
    }

    /// Positions picked by index, in order.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            text: positions.iter().map(|&p| self.text[p]).collect(),
            speech: self.speech.select(positions),
        }
    }
}

/// Per-position distributions. Row `i` predicts the step after input `i`.
pub struct SlmOutput {
    pub text_logits: Var,
    pub code_logits: Vec<Var>,
    pub mu: Option<Var>,
    pub log_var: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoisePolicy {
    Zero,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinueConfig {
    pub steps: usize,
    pub text: Sampling,
    pub codes: Sampling,
    pub noise: NoisePolicy,
}

impl Default for ContinueConfig {
    fn default() -> Self {
        Self {
            steps: 40,
            text: Sampling::Greedy,
            codes: Sampling::Greedy,
            noise: NoisePolicy::Zero,
        }
    }
}

/// Components of one training loss, by name.
pub struct SlmLoss {
    pub total: Var,
    pub parts: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
pub struct Slm {
    pub config: SlmConfig,
    pub store: ParamStore,
    pub lm: BaseLm,
    pub fusion: FusionWeights,
    pub code_embeds: Vec<Embedding>,
    pub latent_in: Option<Linear>,
    pub code_heads: Vec<Linear>,
    pub mu_head: Option<Linear>,
    pub log_var_head: Option<Linear>,
}

impl Slm {
    /// Copies the base model, attaches adapters and adds the speech input
    /// and output layers. Only adapters and new layers are trainable.
    pub fn new(config: SlmConfig, base: &TextLm, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.lm != base.config {
            bail!(Config, "language model shape differs from the base model");
        }
        let mut store = base.store.clone();
        let mut lm = base.lm.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        lm.attach_adapters(&mut store, &mut rng, config.lora_rank, config.lora_alpha);
        let w = config.lm.width;
        let (w_sp, w_txt) = config.fusion_init;
        let fusion = FusionWeights::new(&mut store, "slm", w_sp, w_txt);
        let (mut code_embeds, mut code_heads) = (Vec::new(), Vec::new());
        let (mut latent_in, mut mu_head, mut log_var_head) = (None, None, None);
        match config.mode {
            SlmMode::Token => {
                for r in 0..config.code_layers {
                    // One extra row: the start code fed at the first position.
                    code_embeds.push(Embedding::new(
                        &mut store,
                        &mut rng,
                        &format!("slm.code_embed{r}"),
                        config.codebook_size + 1,
                        w,
                    ));
                    code_heads.push(Linear::new(
                        &mut store,
                        &mut rng,
                        &format!("slm.code_head{r}"),
                        w,
                        config.codebook_size,
                        true,
                    ));
                }
            }
            SlmMode::Embed => {
                latent_in = Some(Linear::new(&mut store, &mut rng, "slm.latent_in", config.latent_dim, w, false));
                mu_head = Some(Linear::new(&mut store, &mut rng, "slm.mu_head", w, config.latent_dim, true));
                log_var_head = Some(Linear::zeros(&mut store, "slm.log_var_head", w, config.latent_dim, true));
            }
        }
        store.set_trainable_prefix(BASE_PREFIX, false);
        let adapters: Vec<_> = store.iter().filter(|(_, n, _)| n.contains(".lora_")).map(|(id, _, _)| id).collect();
        for id in adapters {
            store.set_trainable(id, true);
        }
        Ok(Self {
            config,
            store,
            lm,
            fusion,
            code_embeds,
            latent_in,
            code_heads,
            mu_head,
            log_var_head,
        })
    }

    pub fn mode(&self) -> SlmMode {
        self.config.mode
    }

    pub fn vocab(&self) -> usize {
        self.lm.vocab
    }

    /// Code fed alongside the start token.
    pub fn start_code(&self) -> usize {
        self.config.codebook_size
    }

    /// Zeroes every adapter up-projection.
    pub fn zero_adapters(&mut self) {
        let ids: Vec<_> = self.store.iter().filter(|(_, n, _)| n.ends_with(".lora_up")).map(|(id, _, _)| id).collect();
        for id in ids {
            let m = self.store.get_mut(id);
            *m = Matrix::zeros(m.rows(), m.cols());
        }
    }

    fn check_stream(&self, speech: &SpeechStream) -> Result<()> {
        if speech.mode() != self.mode() {
            bail!(
                Config,
                "{} speech stream given to a {}-mode model",
                speech.mode().name(),
                self.mode().name()
            );
        }
        match speech {
            SpeechStream::Codes(c) => {
                if c.num_layers() != self.config.code_layers {
                    bail!(
                        Config,
                        "{} code layers but the model has {} heads",
                        c.num_layers(),
                        self.config.code_layers
                    );
                }
                for (r, layer) in c.layers().iter().enumerate() {
                    if let Some(&q) = layer.iter().find(|&&q| q > self.config.codebook_size) {
                        bail!(Argument, "code {} outside codebook {} of size {}", q, r, self.config.codebook_size);
                    }
                }
            }
            SpeechStream::Latents(m) => {
                if m.cols() != self.config.latent_dim {
                    bail!(Shape, "latents have width {} but the model expects {}", m.cols(), self.config.latent_dim);
                }
                if !m.is_finite() {
                    bail!(Argument, "latent inputs must be finite");
                }
            }
        }
        Ok(())
    }

    fn speech_rows(&self, g: &mut Graph, speech: &SpeechStream) -> Result<Var> {
        match speech {
            SpeechStream::Codes(c) => {
                let mut acc: Option<Var> = None;
                for (emb, layer) in self.code_embeds.iter().zip(c.layers()) {
                    let e = emb.forward(g, layer)?;
                    acc = Some(match acc {
                        None => e,
                        Some(a) => g.add(a, e)?,
                    });
                }
                acc.ok_or_else(|| crate::Error::Config(String::from("token mode without code layers")))
            }
            SpeechStream::Latents(m) => {
                let x = g.constant(m.clone());
                self.latent_in.as_ref().expect("embedding mode").forward(g, x)
            }
        }
    }

    /// Distributions for an input prefix. `text_prefix` may start with the
    /// start symbol, paired with the start code or a zero latent row. With
    /// `speech` off the speech stream is ignored and the backbone sees
    /// exactly the base model's input.
    pub fn forward(
        &self,
        g: &mut Graph,
        text_prefix: &[usize],
        speech_prefix: &SpeechStream,
        speech: bool,
    ) -> Result<SlmOutput> {
        if text_prefix.is_empty() {
            bail!(Argument, "empty prefix");
        }
        if text_prefix.len() != speech_prefix.len() {
            bail!(
                Argument,
                "text prefix has {} positions but speech prefix has {}",
                text_prefix.len(),
                speech_prefix.len()
            );
        }
        if let Some(&t) = text_prefix.iter().find(|&&t| t > self.lm.bos()) {
            bail!(Argument, "text token {} outside vocabulary of {}", t, self.vocab());
        }
        self.check_stream(speech_prefix)?;
        let text = self.lm.embed.forward(g, text_prefix)?;
        let rows = if speech {
            let s = self.speech_rows(g, speech_prefix)?;
            self.fusion.fuse(g, Some(s), text, false)?
        } else {
            self.fusion.fuse(g, None, text, true)?
        };
        let (h, text_logits) = self.lm.hidden_and_logits(g, rows)?;
        let code_logits = self
            .code_heads
            .iter()
            .map(|head| head.forward(g, h))
            .collect::<Result<Vec<_>>>()?;
        let mu = self.mu_head.as_ref().map(|l| l.forward(g, h)).transpose()?;
        let log_var = self.log_var_head.as_ref().map(|l| l.forward(g, h)).transpose()?;
        Ok(SlmOutput {
            text_logits,
            code_logits,
            mu,
            log_var,
        })
    }

    /// Start position followed by `seq`: `M + 1` inputs.
    pub fn teacher_inputs(&self, seq: &JointSequence) -> Result<(Vec<usize>, SpeechStream)> {
        check_text(&seq.text, self.vocab())?;
        self.check_stream(&seq.speech)?;
        let text = core::iter::once(self.lm.bos()).chain(seq.text.iter().copied()).collect();
        let speech = match &seq.speech {
            SpeechStream::Codes(c) => {
                let layers = c
                    .layers()
                    .iter()
                    .map(|l| core::iter::once(self.start_code()).chain(l.iter().copied()).collect())
                    .collect();
                SpeechStream::Codes(CodeGrid::new(layers)?)
            }
            SpeechStream::Latents(m) => {
                let mut data = vec![0.0; m.cols()];
                data.extend_from_slice(m.data());
                SpeechStream::Latents(Matrix::from_vec(m.rows() + 1, m.cols(), data)?)
            }
        };
        Ok((text, speech))
    }

    pub fn teacher_forced(&self, g: &mut Graph, seq: &JointSequence, speech: bool) -> Result<SlmOutput> {
        let (text, stream) = self.teacher_inputs(seq)?;
        self.forward(g, &text, &stream, speech)
    }

    /// Mean text cross-entropy over `M + 1` rows (end symbol included).
    pub fn text_loss(&self, seq: &JointSequence, speech: bool) -> Result<f64> {
        let mut g = Graph::with_params(&self.store);
        let out = self.teacher_forced(&mut g, seq, speech)?;
        let targets = text_targets(&seq.text, self.lm.eos());
        let n = targets.len() as f64;
        let l = g.cross_entropy(out.text_logits, targets.into_iter().map(Some).collect(), n)?;
        Ok(g.value(l).item())
    }

    /// Training objective. `noise` is the reparameterization draw for
    /// embedding mode (`M × d_z`).
    pub fn loss(&self, g: &mut Graph, seq: &JointSequence, cfg: &TrainConfig, noise: Option<&Matrix>) -> Result<SlmLoss> {
        if seq.is_empty() {
            bail!(Argument, "cannot train on an empty sequence");
        }
        let out = self.teacher_forced(g, seq, true)?;
        let targets = text_targets(&seq.text, self.lm.eos());
        match &seq.speech {
            SpeechStream::Codes(c) => {
                let code_targets: Vec<Vec<Option<usize>>> = c
                    .layers()
                    .iter()
                    .map(|l| l.iter().copied().map(Some).chain(core::iter::once(None)).collect())
                    .collect();
                let loss = token_lm_loss(g, out.text_logits, &out.code_logits, &targets, &code_targets)?;
                let mut parts = vec![(String::from("text"), loss.text)];
                for (r, c) in loss.codes.into_iter().enumerate() {
                    parts.push((format!("code{r}"), c));
                }
                Ok(SlmLoss {
                    total: loss.total,
                    parts,
                })
            }
            SpeechStream::Latents(m) => {
                let mm = m.rows();
                let mu = out.mu.expect("embedding mode");
                let lv = out.log_var.expect("embedding mode");
                let mu = g.slice_rows(mu, 0..mm)?;
                let lv = g.slice_rows(lv, 0..mm)?;
                let zeros;
                let noise = match noise {
                    Some(n) => n,
                    None => {
                        zeros = Matrix::zeros(mm, m.cols());
                        &zeros
                    }
                };
                let e = sample_latent(g, mu, lv, noise)?;
                let target = g.constant(m.clone());
                let loss = emb_lm_loss(g, out.text_logits, &targets, e, mu, lv, target, cfg)?;
                Ok(SlmLoss {
                    total: loss.total,
                    parts: vec![
                        (String::from("text"), loss.text),
                        (String::from("reg"), loss.reg),
                        (String::from("kl"), loss.kl),
                    ],
                })
            }
        }
    }

    /// Per-position log-probability of each observed step: text log-prob
    /// plus code log-probs, or plus the Gaussian log-density of the latent.
    pub fn step_scores(&self, seq: &JointSequence) -> Result<Vec<f64>> {
        if seq.is_empty() {
            bail!(Argument, "cannot score an empty sequence");
        }
        let mut g = Graph::with_params(&self.store);
        let out = self.teacher_forced(&mut g, seq, true)?;
        let text_lp = log_softmax_rows(g.value(out.text_logits));
        let mut scores: Vec<f64> = seq.text.iter().enumerate().map(|(i, &t)| text_lp.get(i, t)).collect();
        match &seq.speech {
            SpeechStream::Codes(c) => {
                for (&l, layer) in out.code_logits.iter().zip(c.layers()) {
                    let lp = log_softmax_rows(g.value(l));
                    for (i, &q) in layer.iter().enumerate() {
                        if q >= self.config.codebook_size {
                            bail!(Argument, "the start code cannot be scored");
                        }
                        scores[i] += lp.get(i, q);
                    }
                }
            }
            SpeechStream::Latents(m) => {
                let mu = g.value(out.mu.expect("embedding mode"));
                let lv = g.value(out.log_var.expect("embedding mode"));
                for (i, s) in scores.iter_mut().enumerate() {
                    let pred = LatentPrediction::new(mu.select_rows(&[i]), lv.select_rows(&[i]))?;
                    let x = m.select_rows(&[i]);
                    *s += gaussian_log_density(&x, &pred)?;
                }
            }
        }
        Ok(scores)
    }

    /// Total log-probability of the sequence (end symbol excluded).
    pub fn score_likelihood(&self, seq: &JointSequence) -> Result<f64> {
        Ok(self.step_scores(seq)?.iter().sum())
    }

    /// Log-probability of positions `k..` given positions `..k`.
    pub fn conditional_score(&self, seq: &JointSequence, k: usize) -> Result<f64> {
        if k > seq.len() {
            bail!(Argument, "split {} beyond a sequence of {}", k, seq.len());
        }
        Ok(self.step_scores(seq)?[k..].iter().sum())
    }

    /// Autoregressive rollout from `prompt`. Speech is re-predicted at
    /// tokens for which `word_start` holds and repeated otherwise. Stops at
    /// the end symbol (never chosen at the first step) or after
    /// `cfg.steps` steps.
    pub fn continue_joint(
        &self,
        prompt: &JointSequence,
        cfg: &ContinueConfig,
        word_start: impl Fn(usize) -> bool,
        seed: u64,
    ) -> Result<Vec<JointStep>> {
        if cfg.steps == 0 {
            bail!(Argument, "step budget must be at least 1");
        }
        if prompt.is_empty() {
            bail!(Argument, "prompt must not be empty");
        }
        for s in [cfg.text, cfg.codes] {
            if let Sampling::TopK { k, temperature } = s {
                if k == 0 || !(temperature > 0.0) {
                    bail!(Argument, "top-k sampling needs k ≥ 1 and a positive temperature");
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps = prompt.steps();
        let mut out = Vec::new();
        while out.len() < cfg.steps {
            let seq = JointSequence::from_steps(&steps)?;
            let mut g = Graph::with_params(&self.store);
            let o = self.teacher_forced(&mut g, &seq, true)?;
            let row = seq.len();
            let logits = g.value(o.text_logits).row(row).to_vec();
            let token = pick(&logits, self.lm.eos(), out.is_empty(), cfg.text, &mut rng);
            if token == self.lm.eos() {
                break;
            }
            let speech = if word_start(token) {
                match self.mode() {
                    SlmMode::Token => StepSpeech::Codes(
                        o.code_logits
                            .iter()
                            .map(|&l| pick(g.value(l).row(row), usize::MAX, false, cfg.codes, &mut rng))
                            .collect(),
                    ),
                    SlmMode::Embed => {
                        let mu = g.value(o.mu.expect("embedding mode")).row(row);
                        let lv = g.value(o.log_var.expect("embedding mode")).row(row);
                        StepSpeech::Latent(
                            mu.iter()
                                .zip(lv)
                                .map(|(&m, &v)| match cfg.noise {
                                    NoisePolicy::Zero => m,
                                    NoisePolicy::Gaussian => {
                                        let e: f64 = StandardNormal.sample(&mut rng);
                                        m + libm::exp(0.5 * v) * e
                                    }
                                })
                                .collect(),
                        )
                    }
                }
            } else {
                steps.last().expect("non-empty").speech.clone()
            };
            let step = JointStep {
                text_token: token,
                speech,
            };
            steps.push(step.clone());
            out.push(step);
        }
        Ok(out)
    }
}

/// Word-aligned speech streams of one utterance, `M` positions each.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedStreams {
    pub text: Vec<usize>,
    pub codes: CodeGrid,
    pub latents: Matrix,
}

impl AlignedStreams {
    pub fn sequence(&self, mode: SlmMode) -> Result<JointSequence> {
        let speech = match mode {
            SlmMode::Token => SpeechStream::Codes(self.codes.clone()),
            SlmMode::Embed => SpeechStream::Latents(self.latents.clone()),
        };
        JointSequence::new(self.text.clone(), speech)
    }
}

/// Tokenizes speech at word level and repeats each word's codes and
/// dequantized row once per language-model token of that word.
pub fn speech_to_prompt(model: &TasteModel, features: &Matrix, transcription: &Transcription) -> Result<AlignedStreams> {
    if transcription.asr_tokens.is_empty() || transcription.llm_tokens.is_empty() {
        bail!(Argument, "empty transcription");
    }
    let states = model.encode(features)?;
    let tok = model.tokenize(&states, &transcription.asr_tokens, &transcription.asr_groups)?;
    let words = &tok.word_codes;
    if words.codes.len() != transcription.llm_groups.len() {
        bail!(Argument, "tokenizations disagree on the word count");
    }
    let codes = align_codes(&words.codes, &transcription.llm_groups)?;
    let latents = align_to_llm(&words.embedding, &transcription.llm_groups)?.rows;
    Ok(AlignedStreams {
        text: transcription.llm_tokens.clone(),
        codes,
        latents,
    })
}

/// Word means of `rows` repeated per language-model token.
pub fn align_rows(rows: &Matrix, transcription: &Transcription) -> Result<Matrix> {
    let words = word_average(rows, &transcription.asr_groups)?;
    Ok(align_to_llm(&words, &transcription.llm_groups)?.rows)
}

/// Trains adapters, fusion and speech layers on joint sequences.
pub fn train_slm(
    model: &mut Slm,
    data: &[JointSequence],
    cfg: &TrainConfig,
    schedule: &Schedule,
    seed: u64,
    observer: Observer,
) -> Result<Vec<Vec<(String, f64)>>> {
    cfg.validate()?;
    if let Some(bad) = data.iter().find(|s| s.speech.mode() != model.mode()) {
        bail!(
            Config,
            "{} training data for a {}-mode model",
            bad.speech.mode().name(),
            model.mode().name()
        );
    }
    let count = model.store.len();
    run_epochs(
        model,
        |m| &mut m.store,
        data.len(),
        schedule,
        seed,
        "slm",
        observer,
        |_, _| Ok(()),
        |m, epoch, i| {
            let seq = &data[i];
            let noise = match &seq.speech {
                SpeechStream::Latents(l) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((epoch as u64) << 32) | i as u64);
                    let v = (0..l.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    Some(Matrix::from_vec(l.rows(), l.cols(), v)?)
                }
                SpeechStream::Codes(_) => None,
            };
            let mut g = Graph::with_params(&m.store);
            let loss = m.loss(&mut g, seq, cfg, noise.as_ref())?;
            let mut values = vec![(String::from("total"), g.value(loss.total).item())];
            for (name, v) in &loss.parts {
                values.push((name.clone(), g.value(*v).item()));
            }
            Ok((g.backward(loss.total)?.into_params(), values))
        },
        |_, _| Ok(()),
        count,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::random_matrix;
    use crate::Error;

    const SMALL: LmConfig = LmConfig {
        layers: 2,
        width: 16,
        heads: 2,
        ff_hidden: 32,
    };

    fn model(mode: SlmMode, vocab: usize, r: usize, c: usize) -> Slm {
        let base = TextLm::new(SMALL, vocab, 1).unwrap();
        let cfg = SlmConfig {
            lm: SMALL,
            lora_rank: 2,
            lora_alpha: 4.0,
            ..SlmConfig::new(mode, r, c, 3)
        };
        Slm::new(cfg, &base, 2).unwrap()
    }

    fn codes_seq(text: &[usize], cols: &[[usize; 2]]) -> JointSequence {
        let cols: Vec<Vec<usize>> = cols.iter().map(|c| c.to_vec()).collect();
        JointSequence::new(text.to_vec(), SpeechStream::Codes(CodeGrid::from_columns(2, &cols).unwrap())).unwrap()
    }

    fn latent_seq(text: &[usize], seed: u64) -> JointSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        JointSequence::new(text.to_vec(), SpeechStream::Latents(random_matrix(&mut rng, text.len(), 3))).unwrap()
    }

    #[test]
    fn token_forward_shapes_and_normalization() {
        let m = model(SlmMode::Token, 10, 2, 5);
        let seq = codes_seq(&[11, 1, 2, 3], &[[5, 5], [0, 1], [2, 3], [4, 4]]);
        let mut g = Graph::with_params(&m.store);
        let out = m.forward(&mut g, &seq.text, &seq.speech, true).unwrap();
        assert_eq!(g.shape(out.text_logits), (4, 11));
        assert_eq!(out.code_logits.len(), 2);
        for &l in core::iter::once(&out.text_logits).chain(&out.code_logits) {
            let p = crate::tensor::softmax_rows(g.value(l), |_, _| true);
            for row in p.iter_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        assert!(out.mu.is_none());
    }

    #[test]
    fn embed_forward_shapes_and_determinism() {
        let m = model(SlmMode::Embed, 10, 0, 0);
        let seq = latent_seq(&[11, 1, 2, 3], 3);
        let run = || {
            let mut g = Graph::with_params(&m.store);
            let out = m.forward(&mut g, &seq.text, &seq.speech, true).unwrap();
            (g.value(out.mu.unwrap()).clone(), g.value(out.log_var.unwrap()).clone())
        };
        let (mu, lv) = run();
        assert_eq!(mu.shape(), (4, 3));
        assert_eq!(lv.shape(), (4, 3));
        assert_eq!((mu, lv), run());
    }

    #[test]
    fn perturbing_a_position_leaves_earlier_rows_unchanged() {
        let n = 100;
        for mode in [SlmMode::Token, SlmMode::Embed] {
            let m = model(mode, 10, 2, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let text: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
            let base = match mode {
                SlmMode::Token => {
                    let cols: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.random_range(0..5), rng.random_range(0..5)]).collect();
                    JointSequence::new(text, SpeechStream::Codes(CodeGrid::from_columns(2, &cols).unwrap())).unwrap()
                }
                SlmMode::Embed => JointSequence::new(text, SpeechStream::Latents(random_matrix(&mut rng, n, 3))).unwrap(),
            };
            let logits = |seq: &JointSequence| {
                let mut g = Graph::with_params(&m.store);
                let out = m.forward(&mut g, &seq.text, &seq.speech, true).unwrap();
                let mut all = vec![g.value(out.text_logits).clone()];
                all.extend(out.code_logits.iter().map(|&l| g.value(l).clone()));
                all.extend(out.mu.iter().map(|&l| g.value(l).clone()));
                all
            };
            let before = logits(&base);
            for p in [1, 37, 99] {
                let mut edited = base.clone();
                edited.text[p] = (edited.text[p] + 1) % 10;
                match &mut edited.speech {
                    SpeechStream::Codes(c) => {
                        let mut cols = c.columns();
                        cols[p][0] = (cols[p][0] + 1) % 5;
                        *c = CodeGrid::from_columns(2, &cols).unwrap();
                    }
                    SpeechStream::Latents(l) => l.set(p, 0, l.get(p, 0) + 1.0),
                }
                let after = logits(&edited);
                for (a, b) in before.iter().zip(&after) {
                    for i in 0..p {
                        assert_eq!(a.row(i), b.row(i), "row {i} changed after editing {p}");
                    }
                    assert_ne!(a.row(p), b.row(p));
                }
            }
        }
    }

    #[test]
    fn argument_and_config_errors() {
        let m = model(SlmMode::Token, 10, 2, 5);
        let seq = codes_seq(&[1, 2], &[[0, 1], [2, 3]]);
        let mut g = Graph::with_params(&m.store);
        assert!(matches!(
            m.forward(&mut g, &[1, 2, 3], &seq.speech, true),
            Err(Error::Argument(_))
        ));
        assert!(JointSequence::new(vec![1, 2, 3], seq.speech.clone()).is_err());
        let lat = latent_seq(&[1, 2], 1);
        assert!(matches!(m.score_likelihood(&lat), Err(Error::Config(_))));
        let oov = codes_seq(&[1, 10], &[[0, 1], [2, 3]]);
        assert!(matches!(m.score_likelihood(&oov), Err(Error::Argument(_))));
        let cfg = SlmConfig {
            lora_rank: 0,
            lm: SMALL,
            ..SlmConfig::new(SlmMode::Token, 2, 5, 3)
        };
        assert!(matches!(
            Slm::new(cfg, &TextLm::new(SMALL, 10, 1).unwrap(), 0),
            Err(Error::Config(_))
        ));
        let mut m = m;
        assert!(matches!(
            train_slm(&mut m, &[lat], &TrainConfig::default(), &Schedule::default(), 0, &mut |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_head_scores_minus_log_vocab() {
        let mut base = TextLm::new(SMALL, 15, 1).unwrap();
        base.store.assign("lm.head.weight", Matrix::zeros(16, 16)).unwrap();
        let want = -libm::log(16.0);
        assert!((base.score(&[4]).unwrap() - want).abs() < 1e-12);
        let cfg = SlmConfig {
            lm: SMALL,
            ..SlmConfig::new(SlmMode::Token, 1, 1, 3)
        };
        let m = Slm::new(cfg, &base, 0).unwrap();
        let seq = JointSequence::new(vec![4], SpeechStream::Codes(CodeGrid::new(vec![vec![0]]).unwrap())).unwrap();
        assert!((m.score_likelihood(&seq).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn scores_factor_by_the_chain_rule() {
        let token = model(SlmMode::Token, 10, 2, 5);
        let seq = codes_seq(&[1, 2, 3, 4, 5], &[[0, 1], [0, 1], [2, 3], [4, 0], [4, 0]]);
        let embed = model(SlmMode::Embed, 10, 0, 0);
        let lat = latent_seq(&[1, 2, 3, 4, 5], 4);
        for (m, s) in [(&token, &seq), (&embed, &lat)] {
            let total = m.score_likelihood(s).unwrap();
            assert!(total.is_finite());
            for k in 0..=s.len() {
                let head = if k == 0 { 0.0 } else { m.score_likelihood(&s.prefix(k).unwrap()).unwrap() };
                let tail = m.conditional_score(s, k).unwrap();
                assert!((head + tail - total).abs() < 1e-6, "split {k}: {head} + {tail} vs {total}");
            }
        }
    }

    #[test]
    fn zero_adapters_reproduce_the_base_model() {
        let base = TextLm::new(SMALL, 10, 1).unwrap();
        let cfg = SlmConfig {
            lm: SMALL,
            lora_rank: 2,
            lora_alpha: 4.0,
            ..SlmConfig::new(SlmMode::Token, 2, 5, 3)
        };
        let mut m = Slm::new(cfg, &base, 2).unwrap();
        let seq = codes_seq(&[1, 2, 3], &[[0, 1], [0, 1], [2, 3]]);
        let text_logits = |m: &Slm| {
            let mut g = Graph::with_params(&m.store);
            let out = m.teacher_forced(&mut g, &seq, false).unwrap();
            g.value(out.text_logits).clone()
        };
        assert_eq!(text_logits(&m), base.logits(&seq.text).unwrap());
        let base_loss = {
            let mut g = Graph::with_params(&base.store);
            let l = base.loss(&mut g, &seq.text).unwrap();
            g.value(l).item()
        };
        assert_eq!(m.text_loss(&seq, false).unwrap(), base_loss);
        let schedule = Schedule {
            epochs: 3,
            batch_size: 1,
            lr: 1e-2,
            warmup_steps: 0,
            ..Schedule::default()
        };
        train_slm(&mut m, &[seq.clone()], &TrainConfig::default(), &schedule, 0, &mut |_| {}).unwrap();
        assert_ne!(text_logits(&m), base.logits(&seq.text).unwrap());
        for (_, name, value) in base.store.iter() {
            assert_eq!(m.store.get(m.store.find(name).unwrap()), value, "{name} moved");
        }
        m.zero_adapters();
        assert_eq!(text_logits(&m), base.logits(&seq.text).unwrap());
    }

    #[test]
    fn training_lowers_the_loss_in_both_modes() {
        let token_data = vec![
            codes_seq(&[1, 2, 3], &[[0, 1], [0, 1], [2, 3]]),
            codes_seq(&[4, 5], &[[4, 4], [1, 1]]),
        ];
        let embed_data = vec![latent_seq(&[1, 2, 3], 1), latent_seq(&[4, 5], 2)];
        let schedule = Schedule {
            epochs: 30,
            batch_size: 2,
            lr: 1e-2,
            warmup_steps: 0,
            ..Schedule::default()
        };
        for (mode, data) in [(SlmMode::Token, token_data), (SlmMode::Embed, embed_data)] {
            let mut m = model(mode, 10, 2, 5);
            let hist = train_slm(&mut m, &data, &TrainConfig::default(), &schedule, 0, &mut |_| {}).unwrap();
            let first = &hist[0];
            let last = hist.last().unwrap();
            assert!(last[0].1 < first[0].1, "{mode:?}: {first:?} -> {last:?}");
            let names: Vec<&str> = last.iter().map(|(n, _)| n.as_str()).collect();
            match mode {
                SlmMode::Token => assert_eq!(names, ["total", "text", "code0", "code1"]),
                SlmMode::Embed => assert_eq!(names, ["total", "text", "reg", "kl"]),
            }
        }
    }

    #[test]
    fn continuation_contract() {
        let m = model(SlmMode::Token, 10, 2, 5);
        let prompt = codes_seq(&[1, 2], &[[0, 1], [0, 1]]);
        let starts = |t: usize| t % 2 == 0;
        let cfg = ContinueConfig {
            steps: 6,
            ..ContinueConfig::default()
        };
        let a = m.continue_joint(&prompt, &cfg, starts, 1).unwrap();
        assert_eq!(a, m.continue_joint(&prompt, &cfg, starts, 99).unwrap());
        assert!(!a.is_empty() && a.len() <= 6);
        let mut prev = prompt.steps().last().unwrap().speech.clone();
        for s in &a {
            if !starts(s.text_token) {
                assert_eq!(s.speech, prev);
            }
            prev = s.speech.clone();
        }
        let one = ContinueConfig { steps: 1, ..cfg };
        assert_eq!(m.continue_joint(&prompt, &one, starts, 1).unwrap().len(), 1);
        let zero = ContinueConfig { steps: 0, ..cfg };
        assert!(matches!(m.continue_joint(&prompt, &zero, starts, 1), Err(Error::Argument(_))));
        let sampled = ContinueConfig {
            text: Sampling::TopK { k: 5, temperature: 1.0 },
            codes: Sampling::TopK { k: 3, temperature: 1.0 },
            ..cfg
        };
        assert_eq!(
            m.continue_joint(&prompt, &sampled, starts, 7).unwrap(),
            m.continue_joint(&prompt, &sampled, starts, 7).unwrap()
        );

        let e = model(SlmMode::Embed, 10, 0, 0);
        let lat = latent_seq(&[1, 2], 5);
        let zero_noise = e.continue_joint(&lat, &cfg, |_| true, 1).unwrap();
        assert_eq!(zero_noise, e.continue_joint(&lat, &cfg, |_| true, 2).unwrap());
        let noisy = ContinueConfig {
            noise: NoisePolicy::Gaussian,
            ..cfg
        };
        assert_eq!(
            e.continue_joint(&lat, &noisy, |_| true, 3).unwrap(),
            e.continue_joint(&lat, &noisy, |_| true, 3).unwrap()
        );
        assert!(matches!(zero_noise[0].speech, StepSpeech::Latent(ref v) if v.len() == 3));
    }
}
