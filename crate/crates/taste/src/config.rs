//! Run configuration: one TOML file with flat sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taste_core::corpus::CorpusConfig;
use taste_core::decoder::{DecodeConfig, DecoderConfig, Sampling};
use taste_core::losses::{KlForm, Reduction, TrainConfig};
use taste_core::optim::AdamConfig;
use taste_core::slm::{ContinueConfig, LmConfig, NoisePolicy, SlmConfig, SlmMode};
use taste_core::tokenizer::{AggregatorConfig, EncoderConfig, QuantizerConfig, TasteConfig, Variant};
use taste_core::train::Schedule;

use crate::error::{AppError, AppResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// Working directory for every artifact.
    pub out: PathBuf,
    pub corpus: CorpusSection,
    pub tokenizer: TokenizerSection,
    pub train: TrainSection,
    pub slm: SlmSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 7,
            out: PathBuf::from("run"),
            corpus: CorpusSection::default(),
            tokenizer: TokenizerSection::default(),
            train: TrainSection::default(),
            slm: SlmSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub utterances: usize,
    /// Trailing utterances kept out of training.
    pub heldout: usize,
    /// Extra renditions of held-out sentences, appended after the corpus
    /// for editing.
    pub edit_pairs: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub speakers: usize,
    pub frame_rate: f64,
    pub feature_dim: usize,
    pub rate_min: f64,
    pub rate_max: f64,
    pub pitch_levels: usize,
    pub noise_std: f64,
    pub unit_stride: usize,
    pub phone_bins: usize,
    pub pitch_bins: usize,
    pub asr_piece_len: usize,
    pub llm_piece_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self::from_core(&CorpusConfig::default(), 2200, 200)
    }
}

impl CorpusSection {
    pub fn from_core(c: &CorpusConfig, utterances: usize, heldout: usize) -> Self {
        Self {
            utterances,
            heldout,
            edit_pairs: heldout.min(8),
            min_words: c.min_words,
            max_words: c.max_words,
            speakers: c.num_speakers,
            frame_rate: c.frame_rate,
            feature_dim: c.feature_dim,
            rate_min: c.rate_range.0,
            rate_max: c.rate_range.1,
            pitch_levels: c.pitch_levels,
            noise_std: c.noise_std,
            unit_stride: c.unit_stride,
            phone_bins: c.phone_bins,
            pitch_bins: c.pitch_bins,
            asr_piece_len: c.asr_piece_len,
            llm_piece_len: c.llm_piece_len,
        }
    }

    pub fn to_core(&self) -> AppResult<CorpusConfig> {
        let c = CorpusConfig {
            min_words: self.min_words,
            max_words: self.max_words,
            num_speakers: self.speakers,
            frame_rate: self.frame_rate,
            feature_dim: self.feature_dim,
            rate_range: (self.rate_min, self.rate_max),
            pitch_levels: self.pitch_levels,
            noise_std: self.noise_std,
            unit_stride: self.unit_stride,
            phone_bins: self.phone_bins,
            pitch_bins: self.pitch_bins,
            asr_piece_len: self.asr_piece_len,
            llm_piece_len: self.llm_piece_len,
            ..CorpusConfig::default()
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub variant: String,
    pub word_average: bool,
    pub encoder_layers: usize,
    pub encoder_width: usize,
    pub encoder_heads: usize,
    pub encoder_ff: usize,
    pub shallow_layer: usize,
    pub aggregator_layers: usize,
    pub aggregator_heads: usize,
    pub aggregator_width: usize,
    pub aggregator_ff: usize,
    pub embed_dim: usize,
    pub quantizer_layers: usize,
    pub codebook_size: usize,
    pub ema_decay: f64,
    pub kmeans_iterations: usize,
    pub decoder_layers: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub decoder_ff: usize,
    pub speaker_dim: usize,
    /// Gain of the encoder-derived query initialization; 0 keeps the
    /// random initialization.
    pub query_init_gain: f64,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        let cfg = TasteConfig::new(1, 1, 1);
        Self::from_core(&cfg)
    }
}

impl TokenizerSection {
    pub fn from_core(c: &TasteConfig) -> Self {
        Self {
            variant: c.variant.name().to_string(),
            word_average: c.word_average,
            encoder_layers: c.encoder.layers,
            encoder_width: c.encoder.width,
            encoder_heads: c.encoder.heads,
            encoder_ff: c.encoder.ff_hidden,
            shallow_layer: c.encoder.shallow_layer,
            aggregator_layers: c.aggregator.layers,
            aggregator_heads: c.aggregator.heads,
            aggregator_width: c.aggregator.width,
            aggregator_ff: c.aggregator.ff_hidden,
            embed_dim: c.aggregator.embed_dim,
            quantizer_layers: c.quantizer.layers,
            codebook_size: c.quantizer.codebook_size,
            ema_decay: c.quantizer.decay,
            kmeans_iterations: c.quantizer.kmeans_iterations,
            decoder_layers: c.decoder.layers,
            decoder_width: c.decoder.width,
            decoder_heads: c.decoder.heads,
            decoder_ff: c.decoder.ff_hidden,
            speaker_dim: c.decoder.speaker_dim,
            query_init_gain: 16.0,
        }
    }

    pub fn variant(&self) -> AppResult<Variant> {
        Ok(Variant::parse(&self.variant)?)
    }

    pub fn to_core(&self, corpus: &CorpusConfig) -> AppResult<TasteConfig> {
        let asr = corpus.asr_tokenizer()?;
        let cfg = TasteConfig {
            variant: self.variant()?,
            encoder: EncoderConfig {
                feature_dim: corpus.feature_dim,
                layers: self.encoder_layers,
                width: self.encoder_width,
                heads: self.encoder_heads,
                ff_hidden: self.encoder_ff,
                shallow_layer: self.shallow_layer,
            },
            aggregator: AggregatorConfig {
                layers: self.aggregator_layers,
                heads: self.aggregator_heads,
                width: self.aggregator_width,
                ff_hidden: self.aggregator_ff,
                embed_dim: self.embed_dim,
            },
            quantizer: QuantizerConfig {
                layers: self.quantizer_layers,
                codebook_size: self.codebook_size,
                decay: self.ema_decay,
                kmeans_iterations: self.kmeans_iterations,
            },
            decoder: DecoderConfig {
                layers: self.decoder_layers,
                width: self.decoder_width,
                heads: self.decoder_heads,
                ff_hidden: self.decoder_ff,
                speaker_dim: self.speaker_dim,
                embed_dim: self.embed_dim,
            },
            word_average: self.word_average,
            token_vocab: asr.vocab_size(),
            num_units: corpus.num_units(),
            num_speakers: corpus.num_speakers,
            unit_stride: corpus.unit_stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub encoder_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub lr_floor: f64,
    /// Epochs with the quantizer bypassed.
    pub warmup_epochs: usize,
    pub lambda_reg: f64,
    pub lambda_kl: f64,
    /// Weight of the codebook commitment term.
    pub lambda_rvq: f64,
    /// `sum`, `sequence-mean` or `element-mean`.
    pub reduction: String,
    /// `variance` or `sigma`.
    pub kl_form: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            encoder_epochs: 6,
            epochs: 10,
            batch_size: 8,
            lr: 2e-3,
            warmup_steps: 20,
            lr_floor: 0.05,
            warmup_epochs: 2,
            lambda_reg: 1.0,
            lambda_kl: 1.0,
            lambda_rvq: 0.02,
            reduction: "sequence-mean".into(),
            kl_form: "variance".into(),
        }
    }
}

fn schedule(epochs: usize, batch_size: usize, lr: f64, warmup_steps: usize, lr_floor: f64) -> AppResult<Schedule> {
    let s = Schedule {
        epochs,
        batch_size,
        lr,
        warmup_steps,
        lr_floor,
        adam: AdamConfig::default(),
    };
    s.validate()?;
    Ok(s)
}

impl TrainSection {
    pub fn encoder_schedule(&self) -> AppResult<Schedule> {
        schedule(self.encoder_epochs, self.batch_size, self.lr, self.warmup_steps, self.lr_floor)
    }

    pub fn schedule(&self) -> AppResult<Schedule> {
        schedule(self.epochs, self.batch_size, self.lr, self.warmup_steps, self.lr_floor)
    }

    pub fn losses(&self) -> AppResult<TrainConfig> {
        let reduction = match self.reduction.as_str() {
            "sum" => Reduction::Sum,
            "sequence-mean" => Reduction::SequenceMean,
            "element-mean" => Reduction::ElementMean,
            r => return Err(AppError::Config(format!("unknown reduction `{r}`"))),
        };
        let kl_form = match self.kl_form.as_str() {
            "variance" => KlForm::Variance,
            "sigma" => KlForm::Sigma,
            k => return Err(AppError::Config(format!("unknown KL form `{k}`"))),
        };
        let t = TrainConfig {
            lambda_reg: self.lambda_reg,
            lambda_kl: self.lambda_kl,
            lambda_rvq: self.lambda_rvq,
            warmup_epochs: self.warmup_epochs,
            reduction,
            kl_form,
        };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlmSection {
    pub mode: String,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub fusion_speech: f64,
    pub fusion_text: f64,
    /// Text-only sentences for base-model pretraining.
    pub base_sentences: usize,
    pub base_epochs: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
}

impl Default for SlmSection {
    fn default() -> Self {
        let lm = LmConfig::default();
        let c = SlmConfig::new(SlmMode::Token, 1, 1, 1);
        Self {
            mode: "token".into(),
            layers: lm.layers,
            width: lm.width,
            heads: lm.heads,
            ff_hidden: lm.ff_hidden,
            lora_rank: c.lora_rank,
            lora_alpha: c.lora_alpha,
            fusion_speech: c.fusion_init.0,
            fusion_text: c.fusion_init.1,
            base_sentences: 4000,
            base_epochs: 4,
            base_lr: 1e-3,
            epochs: 6,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 20,
        }
    }
}

impl SlmSection {
    pub fn mode(&self) -> AppResult<SlmMode> {
        Ok(SlmMode::parse(&self.mode)?)
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            ff_hidden: self.ff_hidden,
        }
    }

    pub fn to_core(&self, taste: &TasteConfig) -> AppResult<SlmConfig> {
        let c = SlmConfig {
            lm: self.lm(),
            mode: self.mode()?,
            code_layers: taste.quantizer.layers,
            codebook_size: taste.quantizer.codebook_size,
            latent_dim: taste.embed_dim(),
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            fusion_init: (self.fusion_speech, self.fusion_text),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn base_schedule(&self) -> AppResult<Schedule> {
        schedule(self.base_epochs, self.batch_size, self.base_lr, self.warmup_steps, 0.05)
    }

    pub fn schedule(&self) -> AppResult<Schedule> {
        schedule(self.epochs, self.batch_size, self.lr, self.warmup_steps, 0.05)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Words of each held-out utterance used as a continuation prompt.
    pub prompt_words: usize,
    pub continue_steps: usize,
    /// 0 selects greedy decoding.
    pub top_k: usize,
    pub temperature: f64,
    /// `zero` or `gaussian`.
    pub noise: String,
    pub score_pairs: usize,
    pub max_units: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            prompt_words: 3,
            continue_steps: 20,
            top_k: 0,
            temperature: 1.0,
            noise: "zero".into(),
            score_pairs: 200,
            max_units: 200,
        }
    }
}

impl EvalSection {
    pub fn sampling(&self) -> AppResult<Sampling> {
        if self.top_k == 0 {
            return Ok(Sampling::Greedy);
        }
        if !(self.temperature > 0.0) {
            return Err(AppError::Config("temperature must be positive".into()));
        }
        Ok(Sampling::TopK {
            k: self.top_k,
            temperature: self.temperature,
        })
    }

    pub fn continuation(&self) -> AppResult<ContinueConfig> {
        let noise = match self.noise.as_str() {
            "zero" => NoisePolicy::Zero,
            "gaussian" => NoisePolicy::Gaussian,
            n => return Err(AppError::Config(format!("unknown noise policy `{n}`"))),
        };
        let s = self.sampling()?;
        Ok(ContinueConfig {
            steps: self.continue_steps,
            text: s,
            codes: s,
            noise,
        })
    }

    pub fn decode(&self) -> AppResult<DecodeConfig> {
        Ok(DecodeConfig {
            sampling: self.sampling()?,
            max_len: self.max_units,
        })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> AppResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Checks every section by building the core configurations.
    pub fn validate(&self) -> AppResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(AppError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let corpus = self.corpus.to_core()?;
        if self.corpus.utterances <= self.corpus.heldout {
            return Err(AppError::Config("held-out count must be below the utterance count".into()));
        }
        if self.corpus.edit_pairs > self.corpus.heldout {
            return Err(AppError::Config("edit pairs are drawn from held-out sentences and cannot outnumber them".into()));
        }
        if !(self.tokenizer.query_init_gain >= 0.0) || !self.tokenizer.query_init_gain.is_finite() {
            return Err(AppError::Config("query_init_gain must be finite and non-negative".into()));
        }
        let taste = self.tokenizer.to_core(&corpus)?;
        self.train.schedule()?;
        self.train.encoder_schedule()?;
        self.train.losses()?;
        self.slm.to_core(&taste)?;
        self.slm.schedule()?;
        self.slm.base_schedule()?;
        self.eval.continuation()?;
        self.eval.decode()?;
        Ok(())
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out.join("corpus")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.corpus_dir().join("manifest.jsonl")
    }

    pub fn variant_name(&self) -> AppResult<&'static str> {
        Ok(self.tokenizer.variant()?.name())
    }

    pub fn encoder_path(&self) -> PathBuf {
        self.out.join("encoder.ckpt")
    }

    pub fn tokenizer_path(&self) -> AppResult<PathBuf> {
        Ok(self.out.join(format!("tokenizer-{}.ckpt", self.variant_name()?)))
    }

    pub fn base_lm_path(&self) -> PathBuf {
        self.out.join("base-lm.ckpt")
    }

    pub fn slm_path(&self) -> AppResult<PathBuf> {
        Ok(self.out.join(format!("slm-{}.ckpt", self.slm.mode()?.name())))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out.join("metrics.jsonl")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::parse("seed = 3\n[tokenizer]\nvariant = \"text-only\"\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.tokenizer.variant().unwrap(), Variant::TextOnly);
        assert_eq!(partial.train, TrainSection::default());
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "version = 2",
            "[tokenizer]\nvariant = \"nope\"",
            "[train]\nreduction = \"median\"",
            "[slm]\nmode = \"audio\"",
            "[slm]\nlora_rank = 0",
            "[corpus]\nunknown_key = 1",
            "[tokenizer]\nshallow_layer = 3",
            "seed = \"x\"",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(AppError::Config(_))), "{text}");
        }
    }
}
