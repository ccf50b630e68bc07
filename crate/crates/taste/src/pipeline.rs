//! One function per command. Every command reads the run configuration,
//! works inside the configured output directory and appends to its
//! metrics log.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use taste_core::align::{swap_word_tokens, WordCodes, WordGroups};
use taste_core::bitrate::compute_bitrate;
use taste_core::corpus::{generate_corpus, generate_sentences, item_rng, render_item, Corpus, CorpusItem, SubwordTokenizer, Transcription};
use taste_core::corpus::VoiceDesign;
use taste_core::graph::Graph;
use taste_core::slm::{pretrain_text_lm, speech_to_prompt, train_slm, JointSequence, Slm, SlmMode, SpeechStream, TextLm};
use taste_core::tensor::Matrix;
use taste_core::tokenizer::{unit_accuracy, TasteModel, ENCODER_PREFIX};
use taste_core::train::{evaluate_units, prepare, pretrain_encoder, train_tokenizer, Report};

use crate::checkpoint::Checkpoint;
use crate::config::{CorpusSection, RunConfig, SlmSection, TokenizerSection};
use crate::error::{AppError, AppResult};
use crate::export::{BitrateRecord, CodeRecord, ContinuationRecord, EditRecord, ScoreRecord, UnitRecord};
use crate::fsutil::{read_jsonl, write_atomic, write_jsonl};
use crate::manifest::{load_corpus, write_corpus, Manifest};
use crate::metrics::MetricsLog;

/// Command-line overrides applied on top of the configuration file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub mode: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn resolve_config(path: Option<&Path>, ov: &Overrides) -> AppResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(v) = &ov.variant {
        cfg.tokenizer.variant = v.clone();
    }
    if let Some(m) = &ov.mode {
        cfg.slm.mode = m.clone();
    }
    if let Some(o) = &ov.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct Run {
    pub cfg: RunConfig,
    pub log: MetricsLog,
}

impl Run {
    pub fn new(cfg: RunConfig, verbose: bool) -> AppResult<Self> {
        let mut log = MetricsLog::open(&cfg.metrics_path())?;
        log.verbose = verbose;
        Ok(Self { cfg, log })
    }

    pub fn finish(self) -> AppResult<()> {
        self.log.finish()
    }

    fn out(&self, name: impl AsRef<Path>) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn mode(&self) -> AppResult<SlmMode> {
        self.cfg.slm.mode()
    }
}

/// Training, held-out and edit-pair slices of the corpus.
pub struct Splits {
    pub corpus: Corpus,
    pub train_end: usize,
    pub heldout_end: usize,
}

impl Splits {
    pub fn train(&self) -> &[CorpusItem] {
        &self.corpus.items[..self.train_end]
    }

    pub fn heldout(&self) -> &[CorpusItem] {
        &self.corpus.items[self.train_end..self.heldout_end]
    }

    pub fn all(&self) -> &[CorpusItem] {
        &self.corpus.items
    }

    pub fn find(&self, id: &str) -> AppResult<&CorpusItem> {
        self.corpus
            .items
            .iter()
            .find(|it| it.utterance.id == id)
            .ok_or_else(|| AppError::Data(format!("no utterance `{id}` in the corpus")))
    }
}

fn load_splits(cfg: &RunConfig) -> AppResult<Splits> {
    let path = cfg.manifest_path();
    if !path.exists() {
        return Err(AppError::Data(format!("{}: corpus manifest not found; run gen-corpus first", path.display())));
    }
    let manifest = Manifest::read(&path)?;
    if manifest.header.corpus != cfg.corpus || manifest.header.seed != cfg.seed {
        return Err(AppError::Data(format!(
            "{}: corpus was generated with different settings or seed; rerun gen-corpus",
            path.display()
        )));
    }
    let corpus = load_corpus(&path)?;
    let n = cfg.corpus.utterances;
    if corpus.items.len() != n + cfg.corpus.edit_pairs {
        return Err(AppError::Data(format!(
            "{}: {} records, expected {}",
            path.display(),
            corpus.items.len(),
            n + cfg.corpus.edit_pairs
        )));
    }
    Ok(Splits {
        corpus,
        train_end: n - cfg.corpus.heldout,
        heldout_end: n,
    })
}

fn observer(log: &mut MetricsLog) -> impl FnMut(&Report) + '_ {
    move |r: &Report| log.report(r)
}

fn scalars(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Writes the configuration snapshot and the corpus.
pub fn gen_corpus(run: &mut Run) -> AppResult<Manifest> {
    let cfg = &run.cfg;
    let core = cfg.corpus.to_core()?;
    let n = cfg.corpus.utterances;
    let mut corpus = generate_corpus(cfg.seed, n, &core)?;
    let asr = core.asr_tokenizer()?;
    let llm = core.llm_tokenizer()?;
    let design = VoiceDesign::new(core.feature_dim);
    let first_heldout = n - cfg.corpus.heldout;
    for k in 0..cfg.corpus.edit_pairs {
        let index = n + k;
        let source = &corpus.items[first_heldout + k];
        let mut rng = item_rng(cfg.seed, index as u64);
        let shift = rand::Rng::random_range(&mut rng, 1..core.num_speakers.max(2));
        let speaker = (source.utterance.speaker_id + shift) % core.num_speakers;
        let prosody = core.prosody(&mut rng, source.transcription.words.len());
        let item = render_item(
            &core,
            &design,
            (&asr, &llm),
            format!("utt{index:05}"),
            source.transcription.words.clone(),
            speaker,
            &prosody,
            &mut rng,
        )?;
        corpus.items.push(item);
    }
    write_atomic(&cfg.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let manifest = write_corpus(&cfg.manifest_path(), &corpus, &cfg.corpus)?;
    let frames: usize = corpus.items.iter().map(|it| it.utterance.num_frames()).sum();
    run.log.eval(
        "gen-corpus",
        &scalars(&[("utterances", corpus.items.len() as f64), ("frames", frames as f64)]),
    );
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EncoderMeta {
    kind: String,
    seed: u64,
    corpus: CorpusSection,
    layers: usize,
    width: usize,
    heads: usize,
    ff: usize,
    shallow_layer: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
}

fn encoder_meta(cfg: &RunConfig) -> EncoderMeta {
    let t = &cfg.tokenizer;
    EncoderMeta {
        kind: "encoder".into(),
        seed: cfg.seed,
        corpus: cfg.corpus.clone(),
        layers: t.encoder_layers,
        width: t.encoder_width,
        heads: t.encoder_heads,
        ff: t.encoder_ff,
        shallow_layer: t.shallow_layer,
        epochs: cfg.train.encoder_epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
    }
}

/// Loads the shared encoder checkpoint when it matches the configuration,
/// otherwise pre-trains the encoder and writes it.
fn ensure_encoder(run: &mut Run, model: &mut TasteModel, splits: &Splits) -> AppResult<()> {
    let path = run.cfg.encoder_path();
    let meta = encoder_meta(&run.cfg);
    if path.exists() {
        let ck = Checkpoint::read(&path)?;
        if serde_json::from_value::<EncoderMeta>(ck.meta.clone()).ok().as_ref() == Some(&meta) {
            let mut enc = model.store.clone();
            ck.load_prefix(&mut enc, ENCODER_PREFIX)?;
            model.load_encoder(&enc)?;
            return Ok(());
        }
    }
    let schedule = run.cfg.train.encoder_schedule()?;
    let seed = run.cfg.seed;
    pretrain_encoder(model, splits.train(), &schedule, seed, &mut observer(&mut run.log))?;
    let mut ck = Checkpoint::new(serde_json::to_value(&meta).expect("metadata serializes"));
    ck.push_store_prefix(&model.store, ENCODER_PREFIX);
    ck.write(&path)?;
    // Reload so the in-memory encoder matches the stored precision.
    let mut enc = model.store.clone();
    ck.load_prefix(&mut enc, ENCODER_PREFIX)?;
    model.load_encoder(&enc)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TokenizerMeta {
    kind: String,
    seed: u64,
    corpus: CorpusSection,
    tokenizer: TokenizerSection,
    quantizer_enabled: bool,
    top1: f64,
    top5: f64,
    units: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub variant: String,
    pub top1: f64,
    pub top5: f64,
    pub units: usize,
    pub final_loss: f64,
}

/// Trains the configured tokenizer variant and reports held-out unit
/// accuracy.
pub fn train_tokenizer_cmd(run: &mut Run) -> AppResult<TokenizerReport> {
    let splits = load_splits(&run.cfg)?;
    let core = run.cfg.corpus.to_core()?;
    let taste = run.cfg.tokenizer.to_core(&core)?;
    let variant = taste.variant;
    let seed = run.cfg.seed;
    let mut model = TasteModel::new(taste, seed)?;
    ensure_encoder(run, &mut model, &splits)?;
    model.align_aggregator_queries(run.cfg.tokenizer.query_init_gain)?;
    let data = prepare(&model, splits.train())?;
    let held = prepare(&model, splits.heldout())?;
    let losses = run.cfg.train.losses()?;
    let schedule = run.cfg.train.schedule()?;
    let history = train_tokenizer(&mut model, &data, &losses, &schedule, seed, &mut observer(&mut run.log))?;
    let final_loss = history
        .last()
        .and_then(|v| v.iter().find(|(k, _)| k == "total"))
        .map_or(f64::NAN, |(_, v)| *v);
    let acc = evaluate_units(&model, &held)?;
    run.log.eval(
        &format!("tokenizer-eval/{}", variant.name()),
        &scalars(&[("top1", acc.top1), ("top5", acc.top5), ("units", acc.units as f64)]),
    );
    let meta = TokenizerMeta {
        kind: "tokenizer".into(),
        seed,
        corpus: run.cfg.corpus.clone(),
        tokenizer: run.cfg.tokenizer.clone(),
        quantizer_enabled: model.quantizer.enabled,
        top1: acc.top1,
        top5: acc.top5,
        units: acc.units,
    };
    let mut ck = Checkpoint::new(serde_json::to_value(&meta).expect("metadata serializes"));
    ck.push_store(&model.store);
    ck.push_quantizer(&model.quantizer);
    ck.write(&run.cfg.tokenizer_path()?)?;
    let report = TokenizerReport {
        variant: variant.name().into(),
        top1: acc.top1,
        top5: acc.top5,
        units: acc.units,
        final_loss,
    };
    write_atomic(
        &run.out(format!("eval-{}.json", variant.name())),
        serde_json::to_string_pretty(&report).expect("report serializes").as_bytes(),
    )?;
    Ok(report)
}

/// Rebuilds a trained tokenizer from its checkpoint.
pub fn load_tokenizer(cfg: &RunConfig) -> AppResult<TasteModel> {
    let path = cfg.tokenizer_path()?;
    if !path.exists() {
        return Err(AppError::Data(format!("{}: tokenizer checkpoint not found; run train-tokenizer first", path.display())));
    }
    let ck = Checkpoint::read(&path)?;
    let meta: TokenizerMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| AppError::Data(format!("{}: metadata: {e}", path.display())))?;
    if meta.kind != "tokenizer" {
        return Err(AppError::Data(format!("{}: not a tokenizer checkpoint", path.display())));
    }
    if meta.corpus != cfg.corpus {
        return Err(AppError::Data(format!("{}: trained on a different corpus configuration", path.display())));
    }
    let core = meta.corpus.to_core()?;
    let taste = meta.tokenizer.to_core(&core)?;
    let mut model = TasteModel::new(taste.clone(), meta.seed)?;
    ck.load_store(&mut model.store)?;
    model.freeze_encoder();
    model.quantizer = ck.quantizer(taste.quantizer.layers, taste.quantizer.decay, meta.quantizer_enabled)?;
    Ok(model)
}

fn require_codes(model: &TasteModel) -> AppResult<()> {
    if !model.variant().quantizes() {
        return Err(AppError::Config(format!(
            "variant {} has no quantizer; codes need enc+agg+quan",
            model.variant().name()
        )));
    }
    if !model.quantizer.enabled {
        return Err(AppError::Config("the quantizer never left warmup; train for more epochs than warmup_epochs".into()));
    }
    Ok(())
}

fn code_record(model: &TasteModel, item: &CorpusItem) -> AppResult<CodeRecord> {
    let states = model.encode(&item.utterance.features)?;
    let t = &item.transcription;
    let tok = model.tokenize(&states, &t.asr_tokens, &t.asr_groups)?;
    Ok(CodeRecord {
        id: item.utterance.id.clone(),
        words: t.words.clone(),
        duration_s: item.utterance.duration_s,
        codes: tok.token_codes.codes.layers().to_vec(),
        word_codes: tok.word_codes.codes.layers().to_vec(),
    })
}

pub fn codes_path(cfg: &RunConfig) -> AppResult<PathBuf> {
    Ok(cfg.out.join(format!("codes-{}.jsonl", cfg.variant_name()?)))
}

/// Exports token- and word-level codes of every utterance.
pub fn tokenize_cmd(run: &mut Run) -> AppResult<Vec<CodeRecord>> {
    let splits = load_splits(&run.cfg)?;
    let model = load_tokenizer(&run.cfg)?;
    require_codes(&model)?;
    let records = splits
        .all()
        .iter()
        .map(|it| code_record(&model, it))
        .collect::<AppResult<Vec<_>>>()?;
    write_jsonl(&codes_path(&run.cfg)?, &records)?;
    let positions: usize = records.iter().map(|r| r.codes.first().map_or(0, Vec::len)).sum();
    run.log.eval(
        &format!("tokenize/{}", model.variant().name()),
        &scalars(&[("utterances", records.len() as f64), ("positions", positions as f64)]),
    );
    Ok(records)
}

/// Speech rows the decoder consumes at inference: word codes when the
/// variant quantizes, continuous rows otherwise.
fn inference_rows(model: &TasteModel, item: &CorpusItem) -> AppResult<(Option<Matrix>, Option<Matrix>)> {
    let states = model.encode(&item.utterance.features)?;
    let t = &item.transcription;
    if model.variant().quantizes() && model.quantizer.enabled {
        let tok = model.tokenize(&states, &t.asr_tokens, &t.asr_groups)?;
        return Ok((Some(model.rows_from_word_codes(&tok.word_codes.codes, &t.asr_groups)?), None));
    }
    let mut g = Graph::with_params(&model.store);
    let rows = model.speech_rows(&mut g, &states, &t.asr_tokens, &t.asr_groups, false)?;
    Ok((rows.taste.map(|v| g.value(v).clone()), rows.frames.map(|v| g.value(v).clone())))
}

fn sub_seed(seed: u64, stream: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 4);
    rand::Rng::random(&mut rng)
}

pub fn units_path(cfg: &RunConfig) -> AppResult<PathBuf> {
    Ok(cfg.out.join(format!("units-{}.jsonl", cfg.variant_name()?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructReport {
    pub variant: String,
    pub top1: f64,
    pub top5: f64,
    pub units: usize,
}

/// Regenerates held-out units from speech rows and reports teacher-forced
/// accuracy against the reference units.
pub fn reconstruct_cmd(run: &mut Run) -> AppResult<ReconstructReport> {
    let splits = load_splits(&run.cfg)?;
    let model = load_tokenizer(&run.cfg)?;
    let decode = run.cfg.eval.decode()?;
    let held = prepare(&model, splits.heldout())?;
    let mut records = Vec::with_capacity(held.len());
    let (mut t1, mut t5, mut n) = (0, 0, 0);
    for (i, (item, p)) in splits.heldout().iter().zip(&held).enumerate() {
        let logits = model.unit_logits(&p.example())?;
        let (a, b, c) = unit_accuracy(&logits, &p.units);
        t1 += a;
        t5 += b;
        n += c;
        let (taste, frames) = inference_rows(&model, item)?;
        let units = model.generate(
            taste.as_ref(),
            frames.as_ref(),
            &p.tokens,
            p.speaker,
            &decode,
            sub_seed(run.cfg.seed, 0x7265, i),
        )?;
        records.push(UnitRecord {
            id: p.id.clone(),
            units: units.units,
            top1: Some(a as f64 / c.max(1) as f64),
            top5: Some(b as f64 / c.max(1) as f64),
        });
    }
    if n == 0 {
        return Err(AppError::Data("no held-out units to evaluate".into()));
    }
    write_jsonl(&units_path(&run.cfg)?, &records)?;
    let report = ReconstructReport {
        variant: model.variant().name().into(),
        top1: t1 as f64 / n as f64,
        top5: t5 as f64 / n as f64,
        units: n,
    };
    run.log.eval(
        &format!("reconstruct/{}", report.variant),
        &scalars(&[("top1", report.top1), ("top5", report.top5), ("units", n as f64)]),
    );
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BaseMeta {
    kind: String,
    seed: u64,
    corpus: CorpusSection,
    layers: usize,
    width: usize,
    heads: usize,
    ff_hidden: usize,
    vocab: usize,
    sentences: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
}

fn base_meta(cfg: &RunConfig, vocab: usize) -> BaseMeta {
    let s = &cfg.slm;
    BaseMeta {
        kind: "base-lm".into(),
        seed: cfg.seed,
        corpus: cfg.corpus.clone(),
        layers: s.layers,
        width: s.width,
        heads: s.heads,
        ff_hidden: s.ff_hidden,
        vocab,
        sentences: s.base_sentences,
        epochs: s.base_epochs,
        lr: s.base_lr,
        batch_size: s.batch_size,
    }
}

fn llm_tokenizer(cfg: &RunConfig) -> AppResult<SubwordTokenizer> {
    Ok(cfg.corpus.to_core()?.llm_tokenizer()?)
}

/// Loads the text-only base model, pre-training it first when no matching
/// checkpoint exists.
fn ensure_base_lm(run: &mut Run) -> AppResult<TextLm> {
    let core = run.cfg.corpus.to_core()?;
    let asr = core.asr_tokenizer()?;
    let llm = core.llm_tokenizer()?;
    let meta = base_meta(&run.cfg, llm.vocab_size());
    let path = run.cfg.base_lm_path();
    let mut lm = TextLm::new(run.cfg.slm.lm(), llm.vocab_size(), run.cfg.seed)?;
    if path.exists() {
        let ck = Checkpoint::read(&path)?;
        if serde_json::from_value::<BaseMeta>(ck.meta.clone()).ok().as_ref() == Some(&meta) {
            ck.load_store(&mut lm.store)?;
            return Ok(lm);
        }
    }
    let sentences = generate_sentences(run.cfg.seed, run.cfg.slm.base_sentences, &core)?
        .into_iter()
        .map(|words| Ok(Transcription::new(words, &asr, &llm)?.llm_tokens))
        .collect::<AppResult<Vec<_>>>()?;
    let schedule = run.cfg.slm.base_schedule()?;
    pretrain_text_lm(&mut lm, &sentences, &schedule, run.cfg.seed, &mut observer(&mut run.log))?;
    let mut ck = Checkpoint::new(serde_json::to_value(&meta).expect("metadata serializes"));
    ck.push_store(&lm.store);
    ck.write(&path)?;
    ck.load_store(&mut lm.store)?;
    Ok(lm)
}

fn load_base_lm(cfg: &RunConfig) -> AppResult<TextLm> {
    let vocab = llm_tokenizer(cfg)?.vocab_size();
    let path = cfg.base_lm_path();
    if !path.exists() {
        return Err(AppError::Data(format!("{}: base model not found; run train-slm first", path.display())));
    }
    let ck = Checkpoint::read(&path)?;
    let meta: BaseMeta = ck.meta_all()?;
    if meta != base_meta(cfg, vocab) {
        return Err(AppError::Data(format!("{}: base model does not match the configuration", path.display())));
    }
    let mut lm = TextLm::new(cfg.slm.lm(), vocab, cfg.seed)?;
    ck.load_store(&mut lm.store)?;
    Ok(lm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SlmMeta {
    kind: String,
    seed: u64,
    corpus: CorpusSection,
    tokenizer_variant: String,
    slm: SlmSection,
}

fn joint_sequence(model: &TasteModel, item: &CorpusItem, mode: SlmMode) -> AppResult<JointSequence> {
    Ok(speech_to_prompt(model, &item.utterance.features, &item.transcription)?.sequence(mode)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlmReport {
    pub mode: String,
    pub final_loss: f64,
    pub heldout_text_loss: f64,
    pub base_text_loss: f64,
}

/// Mean per-sequence text loss on held-out items.
fn heldout_text_loss(slm: &Slm, seqs: &[JointSequence], speech: bool) -> AppResult<f64> {
    let mut total = 0.0;
    for s in seqs {
        total += slm.text_loss(s, speech)?;
    }
    Ok(total / seqs.len().max(1) as f64)
}

/// Adapts the base model to joint text and speech sequences.
pub fn train_slm_cmd(run: &mut Run) -> AppResult<SlmReport> {
    let splits = load_splits(&run.cfg)?;
    let taste = load_tokenizer(&run.cfg)?;
    require_codes(&taste)?;
    let mode = run.mode()?;
    let base = ensure_base_lm(run)?;
    let slm_cfg = run.cfg.slm.to_core(&taste.config)?;
    let mut slm = Slm::new(slm_cfg, &base, run.cfg.seed)?;
    let train = splits
        .train()
        .iter()
        .map(|it| joint_sequence(&taste, it, mode))
        .collect::<AppResult<Vec<_>>>()?;
    let held = splits
        .heldout()
        .iter()
        .map(|it| joint_sequence(&taste, it, mode))
        .collect::<AppResult<Vec<_>>>()?;
    let base_text_loss = heldout_text_loss(&slm, &held, false)?;
    let losses = run.cfg.train.losses()?;
    let schedule = run.cfg.slm.schedule()?;
    let seed = run.cfg.seed;
    let history = train_slm(&mut slm, &train, &losses, &schedule, seed, &mut observer(&mut run.log))?;
    let final_loss = history
        .last()
        .and_then(|v| v.iter().find(|(k, _)| k == "total"))
        .map_or(f64::NAN, |(_, v)| *v);
    let heldout = heldout_text_loss(&slm, &held, true)?;
    run.log.eval(
        &format!("slm-eval/{}", mode.name()),
        &scalars(&[("heldout_text", heldout), ("base_text", base_text_loss)]),
    );
    let meta = SlmMeta {
        kind: "slm".into(),
        seed,
        corpus: run.cfg.corpus.clone(),
        tokenizer_variant: taste.variant().name().into(),
        slm: run.cfg.slm.clone(),
    };
    let mut ck = Checkpoint::new(serde_json::to_value(&meta).expect("metadata serializes"));
    ck.push_store(&slm.store);
    ck.write(&run.cfg.slm_path()?)?;
    Ok(SlmReport {
        mode: mode.name().into(),
        final_loss,
        heldout_text_loss: heldout,
        base_text_loss,
    })
}

fn load_slm(cfg: &RunConfig, taste: &TasteModel) -> AppResult<Slm> {
    let path = cfg.slm_path()?;
    if !path.exists() {
        return Err(AppError::Data(format!("{}: model not found; run train-slm first", path.display())));
    }
    let ck = Checkpoint::read(&path)?;
    let meta: SlmMeta = ck.meta_all()?;
    if meta.kind != "slm" || meta.corpus != cfg.corpus || meta.slm != cfg.slm {
        return Err(AppError::Data(format!("{}: checkpoint does not match the configuration", path.display())));
    }
    if meta.tokenizer_variant != taste.variant().name() {
        return Err(AppError::Config(format!(
            "{}: trained on {} codes, tokenizer is {}",
            path.display(),
            meta.tokenizer_variant,
            taste.variant().name()
        )));
    }
    let base = load_base_lm(cfg)?;
    let mut slm = Slm::new(cfg.slm.to_core(&taste.config)?, &base, cfg.seed)?;
    ck.load_store(&mut slm.store)?;
    Ok(slm)
}

/// Prompt of the first `words` words of `item`, as a step count.
fn prompt_len(item: &CorpusItem, words: usize) -> usize {
    let g = &item.transcription.llm_groups;
    g.lengths().iter().take(words.min(g.len())).sum()
}

/// Scoring prompt: up to `words` words, leaving at least two words to rank.
fn score_prompt_len(item: &CorpusItem, words: usize) -> usize {
    let w = item.transcription.llm_groups.len();
    prompt_len(item, words.min(w.saturating_sub(2)).max(1))
}

pub fn continuations_path(cfg: &RunConfig) -> AppResult<PathBuf> {
    Ok(cfg.out.join(format!("continuations-{}.jsonl", cfg.slm.mode()?.name())))
}

/// Continues every held-out utterance from its first words.
pub fn continue_cmd(run: &mut Run) -> AppResult<Vec<ContinuationRecord>> {
    let splits = load_splits(&run.cfg)?;
    let taste = load_tokenizer(&run.cfg)?;
    require_codes(&taste)?;
    let slm = load_slm(&run.cfg, &taste)?;
    let llm = llm_tokenizer(&run.cfg)?;
    let mode = run.mode()?;
    let cont = run.cfg.eval.continuation()?;
    let mut records = Vec::new();
    for (i, item) in splits.heldout().iter().enumerate() {
        let seq = joint_sequence(&taste, item, mode)?;
        let k = prompt_len(item, run.cfg.eval.prompt_words);
        let prompt = seq.prefix(k)?;
        let steps = slm.continue_joint(&prompt, &cont, |t| llm.is_word_start(t), sub_seed(run.cfg.seed, 0x636f, i))?;
        let tokens: Vec<usize> = steps.iter().map(|s| s.text_token).collect();
        let full: Vec<usize> = prompt.text.iter().copied().chain(tokens.iter().copied()).collect();
        let text = match llm.detokenize(&full) {
            Ok(words) => words.join(" "),
            Err(_) => format!("{full:?}"),
        };
        let cont_seq = if steps.is_empty() { None } else { Some(JointSequence::from_steps(&steps)?) };
        let (codes, latents) = match cont_seq.map(|s| s.speech) {
            Some(SpeechStream::Codes(c)) => (Some(c.layers().to_vec()), None),
            Some(SpeechStream::Latents(l)) => (None, Some(l.iter_rows().map(<[f64]>::to_vec).collect())),
            None => (None, None),
        };
        records.push(ContinuationRecord {
            prompt_id: item.utterance.id.clone(),
            prompt: item.transcription.words[..run.cfg.eval.prompt_words.min(item.transcription.words.len())].join(" "),
            text,
            tokens,
            codes,
            latents,
        });
    }
    write_jsonl(&continuations_path(&run.cfg)?, &records)?;
    let mean_len = records.iter().map(|r| r.tokens.len()).sum::<usize>() as f64 / records.len().max(1) as f64;
    run.log.eval(&format!("continue/{}", mode.name()), &scalars(&[("mean_tokens", mean_len)]));
    Ok(records)
}

/// The continuation steps of `seq` after `k`, shuffled jointly (text with
/// its speech), never left in the original order.
pub fn shuffled_negative(seq: &JointSequence, k: usize, rng: &mut ChaCha8Rng) -> Option<JointSequence> {
    let n = seq.len();
    if n < k + 2 {
        return None;
    }
    let mut tail: Vec<usize> = (k..n).collect();
    tail.shuffle(rng);
    if tail.iter().zip(k..n).all(|(&a, b)| seq.text[a] == seq.text[b]) {
        tail.rotate_left(1);
        if tail.iter().zip(k..n).all(|(&a, b)| seq.text[a] == seq.text[b]) {
            return None;
        }
    }
    let order: Vec<usize> = (0..k).chain(tail).collect();
    Some(seq.select(&order))
}

pub fn scores_path(cfg: &RunConfig) -> AppResult<PathBuf> {
    Ok(cfg.out.join(format!("scores-{}.jsonl", cfg.slm.mode()?.name())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mode: String,
    pub pairs: usize,
    pub accuracy: f64,
}

/// Ranks true held-out continuations against token-shuffled negatives.
pub fn score_cmd(run: &mut Run) -> AppResult<ScoreReport> {
    let splits = load_splits(&run.cfg)?;
    let taste = load_tokenizer(&run.cfg)?;
    require_codes(&taste)?;
    let slm = load_slm(&run.cfg, &taste)?;
    let mode = run.mode()?;
    let mut records = Vec::new();
    for (i, item) in splits.heldout().iter().enumerate() {
        if records.len() >= run.cfg.eval.score_pairs {
            break;
        }
        let seq = joint_sequence(&taste, item, mode)?;
        let k = score_prompt_len(item, run.cfg.eval.prompt_words);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(run.cfg.seed, 0x7363, i));
        let Some(neg) = shuffled_negative(&seq, k, &mut rng) else {
            continue;
        };
        let t = slm.conditional_score(&seq, k)?;
        let f = slm.conditional_score(&neg, k)?;
        if !t.is_finite() || !f.is_finite() {
            return Err(AppError::Numerical(format!("{}: non-finite score", item.utterance.id)));
        }
        records.push(ScoreRecord {
            id: item.utterance.id.clone(),
            true_score: t,
            negative_score: f,
            prefers_true: t > f,
        });
    }
    if records.is_empty() {
        return Err(AppError::Data("no held-out item is long enough to score".into()));
    }
    write_jsonl(&scores_path(&run.cfg)?, &records)?;
    let wins = records.iter().filter(|r| r.prefers_true).count();
    let report = ScoreReport {
        mode: mode.name().into(),
        pairs: records.len(),
        accuracy: wins as f64 / records.len() as f64,
    };
    run.log.eval(
        &format!("score/{}", report.mode),
        &scalars(&[("accuracy", report.accuracy), ("pairs", report.pairs as f64)]),
    );
    Ok(report)
}

fn word_codes(model: &TasteModel, item: &CorpusItem) -> AppResult<WordCodes> {
    let rec = code_record(model, item)?;
    let grid = rec.word_grid()?;
    let groups = WordGroups::from_lengths(&vec![1; grid.len()])?;
    Ok(WordCodes::new(rec.words, grid, groups)?)
}

pub fn edit_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("edit.jsonl")
}

/// Swaps the word codes of the chosen words between two renditions of the
/// same sentence and regenerates units from both edited sequences.
pub fn edit_cmd(run: &mut Run, id_a: &str, id_b: &str, words: &[usize]) -> AppResult<Vec<EditRecord>> {
    let splits = load_splits(&run.cfg)?;
    let model = load_tokenizer(&run.cfg)?;
    require_codes(&model)?;
    let decode = run.cfg.eval.decode()?;
    let (a, b) = (splits.find(id_a)?, splits.find(id_b)?);
    if a.transcription.words != b.transcription.words {
        return Err(AppError::Data(format!("{id_a} and {id_b} have different transcripts")));
    }
    let (ca, cb) = (word_codes(&model, a)?, word_codes(&model, b)?);
    let (ea, eb) = swap_word_tokens(&ca, &cb, words).map_err(|e| match e {
        taste_core::Error::Argument(m) => AppError::Config(m),
        other => other.into(),
    })?;
    let mut records = Vec::with_capacity(2);
    for (k, (src, edited)) in [(a, ea), (b, eb)].into_iter().enumerate() {
        let t = &src.transcription;
        let rows = model.rows_from_word_codes(&edited.codes, &t.asr_groups)?;
        let units = model.generate(
            Some(&rows),
            None,
            &t.asr_tokens,
            src.utterance.speaker_id,
            &decode,
            sub_seed(run.cfg.seed, 0x6564, k),
        )?;
        records.push(EditRecord {
            id: format!("{}-edited", src.utterance.id),
            source: src.utterance.id.clone(),
            words: t.words.clone(),
            swapped: words.to_vec(),
            word_codes: edited.codes.layers().to_vec(),
            units: units.units,
        });
    }
    write_jsonl(&edit_path(&run.cfg), &records)?;
    run.log.eval("edit", &scalars(&[("swapped_words", words.len() as f64)]));
    Ok(records)
}

/// Pairs of utterances in the corpus that share a transcript.
pub fn edit_pairs(cfg: &RunConfig) -> AppResult<Vec<(String, String)>> {
    let splits = load_splits(cfg)?;
    let n = cfg.corpus.utterances;
    let first = n - cfg.corpus.heldout;
    Ok((0..cfg.corpus.edit_pairs)
        .map(|k| {
            (
                splits.corpus.items[first + k].utterance.id.clone(),
                splits.corpus.items[n + k].utterance.id.clone(),
            )
        })
        .collect())
}

pub fn bitrate_path(cfg: &RunConfig) -> AppResult<PathBuf> {
    Ok(cfg.out.join(format!("bitrate-{}.json", cfg.variant_name()?)))
}

/// Token frequency and bitrate of the exported codes, with durations taken
/// from the manifest.
pub fn bitrate_cmd(run: &mut Run) -> AppResult<BitrateRecord> {
    let manifest_path = run.cfg.manifest_path();
    if !manifest_path.exists() {
        return Err(AppError::Data(format!("{}: corpus manifest not found", manifest_path.display())));
    }
    let manifest = Manifest::read(&manifest_path)?;
    let codes_file = codes_path(&run.cfg)?;
    if !codes_file.exists() {
        return Err(AppError::Data(format!("{}: code export not found; run tokenize first", codes_file.display())));
    }
    let codes: Vec<CodeRecord> = read_jsonl(&codes_file)?;
    let taste = run.cfg.tokenizer.to_core(&run.cfg.corpus.to_core()?)?;
    let (r, c) = (taste.quantizer.layers, taste.quantizer.codebook_size);
    let mut items = Vec::with_capacity(codes.len());
    for rec in &codes {
        let m = manifest
            .records
            .iter()
            .find(|m| m.id == rec.id)
            .ok_or_else(|| AppError::Data(format!("{}: `{}` is not in the manifest", codes_file.display(), rec.id)))?;
        let grid = rec.token_grid()?;
        if grid.num_layers() != r {
            return Err(AppError::Data(format!("{}: {} code layers, expected {r}", rec.id, grid.num_layers())));
        }
        items.push((grid.len(), m.duration_s));
    }
    let asr_vocab = run.cfg.corpus.to_core()?.asr_tokenizer()?.vocab_size();
    let text_bits = (asr_vocab as f64).log2();
    let b = compute_bitrate(&items, r, c, Some(text_bits))?;
    let rec = BitrateRecord {
        layers: r,
        codebook_size: c,
        positions: items.iter().map(|(n, _)| n).sum(),
        seconds: items.iter().map(|(_, s)| s).sum(),
        frequency_hz: b.frequency_hz,
        speech_bps: b.speech_bps,
        joint_bps: b.joint_bps,
    };
    write_atomic(
        &bitrate_path(&run.cfg)?,
        serde_json::to_string_pretty(&rec).expect("record serializes").as_bytes(),
    )?;
    run.log.eval(
        "bitrate",
        &scalars(&[("frequency_hz", rec.frequency_hz), ("speech_bps", rec.speech_bps)]),
    );
    Ok(rec)
}

/// Summary printed by the binary.
pub fn summary<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|_| json!(null).to_string())
}
