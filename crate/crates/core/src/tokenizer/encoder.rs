//! Bidirectional frame encoder, trained once on a pretext task and frozen.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::graph::{Graph, Mask, Var};
use crate::nn::{sinusoidal_positions, LayerNorm, Linear, TransformerBlock};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// 1-based index of the shallow layer whose states become values.
    pub shallow_layer: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            layers: 4,
            width: 64,
            heads: 4,
            ff_hidden: 128,
            shallow_layer: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            bail!(Config, "encoder needs at least two layers, got {}", self.layers);
        }
        if self.shallow_layer < 1 || self.shallow_layer > self.layers / 2 {
            bail!(
                Config,
                "shallow layer {} outside 1..={}",
                self.shallow_layer,
                self.layers / 2
            );
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            bail!(Config, "{} heads do not divide width {}", self.heads, self.width);
        }
        Ok(())
    }
}

/// Last-layer and shallow-layer hidden states of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub h_last: Matrix,
    pub h_shallow: Matrix,
    pub layer_index: usize,
}

impl EncoderStates {
    pub fn num_frames(&self) -> usize {
        self.h_last.rows()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    /// Pretext head on the last layer: recognizer token of each frame.
    pub token_head: Linear,
    /// Pretext head on the shallow layer: target unit of each frame.
    pub unit_head: Linear,
}

pub const ENCODER_PREFIX: &str = "encoder.";

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: EncoderConfig,
        token_vocab: usize,
        unit_vocab: usize,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(store, rng, &format!("encoder.block{i}"), w, config.heads, config.ff_hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input: Linear::new(store, rng, "encoder.input", config.feature_dim, w, true),
            blocks,
            final_norm: LayerNorm::new(store, "encoder.final_norm", w),
            token_head: Linear::new(store, rng, "encoder.token_head", w, token_vocab, true),
            unit_head: Linear::new(store, rng, "encoder.unit_head", w, unit_vocab, true),
            config,
        })
    }

    /// Hidden states after every block (index `i` holds layer `i + 1`).
    pub fn layers(&self, g: &mut Graph, features: &Matrix) -> Result<Vec<Var>> {
        if features.rows() == 0 {
            bail!(Argument, "cannot encode an utterance with no frames");
        }
        if features.cols() != self.config.feature_dim {
            bail!(
                Shape,
                "features have width {} but the encoder expects {}",
                features.cols(),
                self.config.feature_dim
            );
        }
        let x = g.constant(features.clone());
        let h = self.input.forward(g, x)?;
        let pos = g.constant(sinusoidal_positions(features.rows(), self.config.width, 0));
        let mut h = g.add(h, pos)?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(g, h, Mask::Full)?;
            out.push(h);
        }
        let last = out.len() - 1;
        out[last] = self.final_norm.forward(g, out[last])?;
        Ok(out)
    }

    pub fn encode(&self, store: &ParamStore, features: &Matrix) -> Result<EncoderStates> {
        let mut g = Graph::with_params(store);
        let layers = self.layers(&mut g, features)?;
        let l = self.config.shallow_layer;
        Ok(EncoderStates {
            h_last: g.value(*layers.last().expect("at least two layers")).clone(),
            h_shallow: g.value(layers[l - 1]).clone(),
            layer_index: l,
        })
    }

    /// Pretext objective: mean frame-level cross-entropy of the recognizer
    /// token (last layer) plus that of the target unit (shallow layer).
    pub fn pretext_loss(
        &self,
        g: &mut Graph,
        features: &Matrix,
        frame_tokens: &[usize],
        frame_units: &[usize],
    ) -> Result<Var> {
        let t = features.rows();
        if frame_tokens.len() != t || frame_units.len() != t {
            bail!(Shape, "pretext targets must have one entry per frame");
        }
        let layers = self.layers(g, features)?;
        let last = *layers.last().expect("at least two layers");
        let shallow = layers[self.config.shallow_layer - 1];
        let tok = self.token_head.forward(g, last)?;
        let unit = self.unit_head.forward(g, shallow)?;
        let a = g.cross_entropy(tok, frame_tokens.iter().copied().map(Some).collect(), t as f64)?;
        let b = g.cross_entropy(unit, frame_units.iter().copied().map(Some).collect(), t as f64)?;
        g.add(a, b)
    }
}

/// Expands per-token frame counts to one token id per frame.
pub fn frame_labels(tokens: &[usize], frames_per_token: &[usize]) -> Result<Vec<usize>> {
    if tokens.len() != frames_per_token.len() {
        bail!(Shape, "{} tokens but {} frame counts", tokens.len(), frames_per_token.len());
    }
    Ok(tokens
        .iter()
        .zip(frames_per_token)
        .flat_map(|(&t, &n)| core::iter::repeat_n(t, n))
        .collect())
}

/// The unit covering each frame when units sit on a grid of `stride` frames.
pub fn frame_units(units: &[usize], frames: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || frames.div_ceil(stride) != units.len() {
        bail!(Shape, "{} units do not cover {} frames at stride {}", units.len(), frames, stride);
    }
    Ok((0..frames).map(|t| units[t / stride]).collect())
}
