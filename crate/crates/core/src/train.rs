//! Training loops: encoder pretext, tokenizer (with quantizer warmup) and
//! evaluation helpers. Progress is reported through a caller-supplied
//! observer so the library stays free of I/O.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;
use core::cell::RefCell;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::WordGroups;
use crate::corpus::CorpusItem;
use crate::error::{bail, Error, Result};
use crate::graph::Graph;
use crate::losses::TrainConfig;
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Matrix;
use crate::tokenizer::{frame_labels, frame_units, unit_accuracy, EncoderStates, Example, TasteCodes, TasteModel, ENCODER_PREFIX};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub adam: AdamConfig,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 20,
            lr_floor: 0.05,
            adam: AdamConfig::default(),
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            bail!(Config, "learning rate must be positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, items: usize) -> usize {
        items.div_ceil(self.batch_size)
    }
}

/// One progress event.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Named scalars; epoch reports carry means over the epoch.
    pub values: Vec<(String, f64)>,
    pub end_of_epoch: bool,
}

pub type Observer<'a> = &'a mut dyn FnMut(&Report);

/// Encoder states and targets of one corpus item.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub states: EncoderStates,
    pub tokens: Vec<usize>,
    pub groups: WordGroups,
    pub speaker: usize,
    pub units: Vec<usize>,
    pub duration_s: f64,
}

impl Prepared {
    pub fn example(&self) -> Example<'_> {
        Example {
            states: &self.states,
            tokens: &self.tokens,
            groups: &self.groups,
            speaker: self.speaker,
            units: &self.units,
        }
    }
}

/// Runs the (frozen) encoder over every item.
pub fn prepare(model: &TasteModel, items: &[CorpusItem]) -> Result<Vec<Prepared>> {
    items
        .iter()
        .map(|it| {
            Ok(Prepared {
                id: it.utterance.id.clone(),
                states: model.encode(&it.utterance.features)?,
                tokens: it.transcription.asr_tokens.clone(),
                groups: it.transcription.asr_groups.clone(),
                speaker: it.utterance.speaker_id,
                units: it.units.units.clone(),
                duration_s: it.utterance.duration_s,
            })
        })
        .collect()
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite(String::from(what)));
    }
    Ok(())
}

struct Meter {
    names: Vec<String>,
    sums: Vec<f64>,
    weight: f64,
}

impl Meter {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            sums: Vec::new(),
            weight: 0.0,
        }
    }

    fn add(&mut self, values: &[(String, f64)], weight: f64) {
        for (name, v) in values {
            match self.names.iter().position(|n| n == name) {
                Some(k) => self.sums[k] += v * weight,
                None => {
                    self.names.push(name.clone());
                    self.sums.push(v * weight);
                }
            }
        }
        self.weight += weight;
    }

    fn means(&self) -> Vec<(String, f64)> {
        let n = if self.weight > 0.0 { self.weight } else { 1.0 };
        self.names.iter().cloned().zip(self.sums.iter().map(|s| s / n)).collect()
    }
}

/// Generic minibatch loop: `loss_fn` returns the gradients and named values
/// of one item, `after_step` runs once per optimizer step.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_epochs<M>(
    model: &mut M,
    store_of: impl Fn(&mut M) -> &mut ParamStore,
    n: usize,
    schedule: &Schedule,
    seed: u64,
    phase: &str,
    observer: Observer,
    mut before_epoch: impl FnMut(&mut M, usize) -> Result<()>,
    mut loss_fn: impl FnMut(&M, usize, usize) -> Result<(Gradients, Vec<(String, f64)>)>,
    mut after_step: impl FnMut(&mut M, usize) -> Result<()>,
    param_count: usize,
) -> Result<Vec<Vec<(String, f64)>>> {
    schedule.validate()?;
    if n == 0 {
        bail!(Argument, "no training items");
    }
    let mut adam = Adam::new(schedule.adam);
    let total = schedule.epochs * schedule.steps_per_epoch(n);
    let mut step = 0;
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        before_epoch(model, epoch)?;
        let order = epoch_order(n, seed, epoch);
        let mut meter = Meter::new();
        for batch in order.chunks(schedule.batch_size) {
            let lr = cosine_lr(schedule.lr, step, total, schedule.warmup_steps, schedule.lr_floor);
            let mut grads = Gradients::new(param_count);
            let mut batch_meter = Meter::new();
            for &i in batch {
                let (g, values) = loss_fn(model, epoch, i)?;
                for (name, v) in &values {
                    check_finite(&format!("{phase} {name} at epoch {epoch}, item {i}"), *v)?;
                }
                grads.merge(&g);
                batch_meter.add(&values, 1.0);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!("{phase} gradients at epoch {epoch}, step {step}")));
            }
            adam.step(store_of(model), &grads, lr);
            after_step(model, epoch)?;
            let values = batch_meter.means();
            meter.add(&values, batch.len() as f64);
            observer(&Report {
                phase: String::from(phase),
                epoch,
                step,
                lr,
                values,
                end_of_epoch: false,
            });
            step += 1;
        }
        let means = meter.means();
        observer(&Report {
            phase: String::from(phase),
            epoch,
            step,
            lr: cosine_lr(schedule.lr, step.saturating_sub(1), total, schedule.warmup_steps, schedule.lr_floor),
            values: means.clone(),
            end_of_epoch: true,
        });
        history.push(means);
    }
    Ok(history)
}

/// Trains the encoder on frame-level token and unit prediction, then
/// freezes it.
pub fn pretrain_encoder(
    model: &mut TasteModel,
    items: &[CorpusItem],
    schedule: &Schedule,
    seed: u64,
    observer: Observer,
) -> Result<Vec<Vec<(String, f64)>>> {
    model.store.set_trainable_prefix(ENCODER_PREFIX, true);
    let stride = model.config.unit_stride;
    let targets = items
        .iter()
        .map(|it| {
            let t = it.utterance.num_frames();
            Ok((
                frame_labels(&it.transcription.asr_tokens, &it.token_frames)?,
                frame_units(&it.units.units, t, stride)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = model.store.len();
    let history = run_epochs(
        model,
        |m| &mut m.store,
        items.len(),
        schedule,
        seed,
        "encoder",
        observer,
        |_, _| Ok(()),
        |m, _, i| {
            let mut g = Graph::with_params(&m.store);
            let (tok, unit) = &targets[i];
            let loss = m.encoder.pretext_loss(&mut g, &items[i].utterance.features, tok, unit)?;
            let v = g.value(loss).item();
            let back = g.backward(loss)?;
            Ok((back.into_params(), alloc::vec![(String::from("pretext"), v)]))
        },
        |_, _| Ok(()),
        count,
    )?;
    model.freeze_encoder();
    Ok(history)
}

/// Rows that the quantizer would see, for codebook initialization.
pub fn quantizer_samples(model: &TasteModel, data: &[Prepared], limit: usize) -> Result<Matrix> {
    let mut rows: Vec<f64> = Vec::new();
    let mut count = 0;
    let d = model.config.embed_dim();
    for p in data.iter().take(limit) {
        let mut g = Graph::with_params(&model.store);
        let s = model.speech_rows(&mut g, &p.states, &p.tokens, &p.groups, false)?;
        if let Some(pre) = s.pre_quant {
            let m = g.value(pre);
            rows.extend_from_slice(m.data());
            count += m.rows();
        }
    }
    Matrix::from_vec(count, d, rows)
}

/// Trains aggregator, quantizer and decoder with the encoder frozen. The
/// quantizer is bypassed for `cfg.warmup_epochs`, initialized by k-means on
/// the aggregator outputs when warmup ends, then updated by EMA.
pub fn train_tokenizer(
    model: &mut TasteModel,
    data: &[Prepared],
    cfg: &TrainConfig,
    schedule: &Schedule,
    seed: u64,
    observer: Observer,
) -> Result<Vec<Vec<(String, f64)>>> {
    cfg.validate()?;
    model.freeze_encoder();
    let quantizes = model.variant().quantizes();
    let warmup = cfg.warmup_epochs;
    let count = model.store.len();
    let pending: RefCell<Vec<TasteCodes>> = RefCell::new(Vec::new());
    let last_residuals: RefCell<Vec<Matrix>> = RefCell::new(Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x51);
    let mut kmeans_rng = rng.clone();
    kmeans_rng.set_stream(0x52);
    let history = run_epochs(
        model,
        |m| &mut m.store,
        data.len(),
        schedule,
        seed,
        "tokenizer",
        observer,
        |m, epoch| {
            if quantizes && epoch == warmup && !m.quantizer.enabled {
                let samples = quantizer_samples(m, data, 512)?;
                let iters = m.config.quantizer.kmeans_iterations;
                m.quantizer.init_kmeans(&samples, iters, &mut kmeans_rng)?;
            }
            let last = last_residuals.borrow();
            if quantizes && epoch > warmup && !last.is_empty() {
                m.quantizer.reseed_dead(&last, &mut rng);
            }
            Ok(())
        },
        |m, _, i| {
            let mut g = Graph::with_params(&m.store);
            let q = m.quantizing();
            let out = m.step(&mut g, &data[i].example(), q)?;
            let mut values = alloc::vec![
                (String::from("total"), g.value(out.total).item()),
                (String::from("ce"), g.value(out.ce).item()),
            ];
            if let Some(r) = out.rvq {
                values.push((String::from("rvq"), g.value(r).item()));
            }
            let objective = match out.rvq {
                Some(r) => {
                    let w = g.scale(r, cfg.lambda_rvq);
                    g.add(out.ce, w)?
                }
                None => out.ce,
            };
            let back = g.backward(objective)?;
            if let Some(codes) = out.speech.codes {
                pending.borrow_mut().push(codes);
            }
            Ok((back.into_params(), values))
        },
        |m, _| {
            let mut p = pending.borrow_mut();
            if !p.is_empty() {
                m.quantizer.ema_update(&p);
                *last_residuals.borrow_mut() = stack_residuals(&p);
                p.clear();
            }
            Ok(())
        },
        count,
    )?;
    Ok(history)
}

fn stack_residuals(batch: &[TasteCodes]) -> Vec<Matrix> {
    let layers = batch[0].residuals.len();
    (0..layers)
        .map(|r| {
            let d = batch[0].residuals[r].cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for b in batch {
                data.extend_from_slice(b.residuals[r].data());
                rows += b.residuals[r].rows();
            }
            Matrix::from_vec(rows, d, data).expect("consistent widths")
        })
        .collect()
}

/// Teacher-forced unit accuracy over a set of items.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnitAccuracy {
    pub top1: f64,
    pub top5: f64,
    pub units: usize,
}

pub fn evaluate_units(model: &TasteModel, data: &[Prepared]) -> Result<UnitAccuracy> {
    let (mut t1, mut t5, mut n) = (0, 0, 0);
    for p in data {
        let logits = model.unit_logits(&p.example())?;
        let (a, b, c) = unit_accuracy(&logits, &p.units);
        t1 += a;
        t5 += b;
        n += c;
    }
    if n == 0 {
        bail!(Argument, "no units to evaluate");
    }
    Ok(UnitAccuracy {
        top1: t1 as f64 / n as f64,
        top5: t5 as f64 / n as f64,
        units: n,
    })
}
