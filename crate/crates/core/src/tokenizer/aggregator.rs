//! Cross-attention aggregator: text-token queries over encoder frames.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::graph::{Graph, Mask, Var};
use crate::nn::{sinusoidal_positions, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AggregatorConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_hidden: usize,
    pub embed_dim: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            ff_hidden: 128,
            embed_dim: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AggregatorLayer {
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub config: AggregatorConfig,
    pub query_embed: Embedding,
    pub layers: Vec<AggregatorLayer>,
    pub output: Linear,
}

/// Aggregator output and per-layer, per-head attention weights.
pub struct Aggregated {
    pub z: Var,
    pub weights: Vec<Vec<Var>>,
}

impl Aggregator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: AggregatorConfig,
        token_vocab: usize,
        state_dim: usize,
    ) -> Result<Self> {
        if config.layers == 0 {
            bail!(Config, "aggregator needs at least one layer");
        }
        let w = config.width;
        let layers = (0..config.layers)
            .map(|i| {
                Ok(AggregatorLayer {
                    attn: MultiHeadAttention::new(store, rng, &format!("aggregator.layer{i}.attn"), w, state_dim, w, config.heads)?,
                    ff_norm: LayerNorm::new(store, &format!("aggregator.layer{i}.ff_norm"), w),
                    ff: FeedForward::new(store, rng, &format!("aggregator.layer{i}.ff"), w, config.ff_hidden),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            query_embed: Embedding::new(store, rng, "aggregator.query_embed", token_vocab, w),
            layers,
            output: Linear::new(store, rng, "aggregator.output", w, config.embed_dim, true),
            config,
        })
    }

    /// Token embeddings plus positions, `[N × width]`.
    pub fn embed_text(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            bail!(Argument, "aggregator needs at least one text token");
        }
        let e = self.query_embed.forward(g, tokens)?;
        let pos = g.constant(sinusoidal_positions(tokens.len(), self.config.width, 0));
        g.add(e, pos)
    }

    /// Layer 1 attends with the text as queries; later layers query with the
    /// previous layer's output. Keys and values are fixed across layers.
    pub fn forward(&self, g: &mut Graph, text: Var, keys: Var, values: Var) -> Result<Aggregated> {
        let (n, dq) = g.shape(text);
        if dq != self.config.width {
            bail!(
                Config,
                "text embedding width {} but aggregator queries expect {}",
                dq,
                self.config.width
            );
        }
        if n == 0 || g.shape(keys).0 == 0 {
            bail!(Argument, "aggregator needs at least one query and one frame");
        }
        let mut x = text;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer.attn.forward(g, x, keys, values, Mask::Full)?;
            let h = layer.ff_norm.forward(g, a.output)?;
            let f = layer.ff.forward(g, h)?;
            x = g.add(a.output, f)?;
            weights.push(a.weights);
        }
        Ok(Aggregated {
            z: self.output.forward(g, x)?,
            weights,
        })
    }
}
