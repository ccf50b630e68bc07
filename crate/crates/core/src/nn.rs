//! Layers built on [`Graph`]: linear maps (with optional low-rank adapters),
//! layer normalization, multi-head attention and transformer blocks.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::graph::{Graph, Mask, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub const NORM_EPS: f64 = 1e-5;

/// Low-rank additive delta `scale · x A B` on top of a frozen linear map.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<LoraAdapter>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let std = 1.0 / libm::sqrt(in_dim as f64);
        let weight = store.add_normal(format!("{name}.weight"), in_dim, out_dim, std, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            adapter: None,
            in_dim,
            out_dim,
        }
    }

    /// A linear map whose weight starts at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), Matrix::zeros(in_dim, out_dim));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            adapter: None,
            in_dim,
            out_dim,
        }
    }

    /// Attaches a rank-`rank` adapter; the up-projection starts at zero so
    /// the layer's output is unchanged until it is trained.
    pub fn attach_adapter<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        rank: usize,
        alpha: f64,
    ) {
        let std = 1.0 / libm::sqrt(self.in_dim as f64);
        let down = store.add_normal(format!("{name}.lora_down"), self.in_dim, rank, std, rng);
        let up = store.add(format!("{name}.lora_up"), Matrix::zeros(rank, self.out_dim));
        self.adapter = Some(LoraAdapter {
            down,
            up,
            scale: alpha / rank as f64,
        });
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.add_row(y, b)?;
        }
        if let Some(a) = &self.adapter {
            let (down, up) = (g.param(a.down), g.param(a.up));
            let h = g.matmul(x, down)?;
            let h = g.matmul(h, up)?;
            let h = g.scale(h, a.scale);
            y = g.add(y, h)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.standardize(x, NORM_EPS);
        let gain = g.param(self.gain);
        let y = g.mul_row(y, gain)?;
        let bias = g.param(self.bias);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        size: usize,
        dim: usize,
    ) -> Self {
        let table = store.add_normal(format!("{name}.table"), size, dim, 1.0, rng);
        Self { table, size, dim }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.size) {
            bail!(Argument, "token id {} outside embedding of size {}", bad, self.size);
        }
        let t = g.param(self.table);
        g.gather(t, ids.to_vec())
    }
}

/// Output of [`MultiHeadAttention::forward`].
pub struct Attention {
    pub output: Var,
    /// Attention weights per head, `queries × keys`.
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    /// Attention whose queries come from `query_dim`-wide inputs and whose
    /// keys and values come from `kv_dim`-wide inputs.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            bail!(Config, "{} heads do not divide width {}", heads, width);
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), query_dim, width, true),
            key: Linear::new(store, rng, &format!("{name}.key"), kv_dim, width, true),
            value: Linear::new(store, rng, &format!("{name}.value"), kv_dim, width, true),
            output: Linear::new(store, rng, &format!("{name}.output"), width, width, true),
            heads,
            width,
        })
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, values: Var, mask: Mask) -> Result<Attention> {
        if g.shape(keys).0 != g.shape(values).0 {
            bail!(
                Shape,
                "keys have {} rows but values have {}",
                g.shape(keys).0,
                g.shape(values).0
            );
        }
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys)?;
        let v = self.value.forward(g, values)?;
        let head_dim = self.width / self.heads;
        let scale = 1.0 / libm::sqrt(head_dim as f64);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, cols.clone())?,
                    g.slice_cols(k, cols.clone())?,
                    g.slice_cols(v, cols)?,
                )
            };
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, scale);
            let p = g.softmax(s, mask);
            outs.push(g.matmul(p, vh)?);
            weights.push(p);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok(Attention {
            output: self.output.forward(g, joined)?,
            weights,
        })
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), width, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, width, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), width),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), width, width, width, heads)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), width),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), width, ff_hidden),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Mask) -> Result<Var> {
        let h = self.attn_norm.forward(g, x)?;
        let a = self.attn.forward(g, h, h, h, mask)?;
        let x = g.add(x, a.output)?;
        let h = self.ff_norm.forward(g, x)?;
        let f = self.ff.forward(g, h)?;
        g.add(x, f)
    }

    /// Adapters on the four attention projections.
    pub fn attach_adapters<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        rank: usize,
        alpha: f64,
    ) {
        let attn = &mut self.attn;
        attn.query.attach_adapter(store, rng, &format!("{name}.attn.query"), rank, alpha);
        attn.key.attach_adapter(store, rng, &format!("{name}.attn.key"), rank, alpha);
        attn.value.attach_adapter(store, rng, &format!("{name}.attn.value"), rank, alpha);
        attn.output.attach_adapter(store, rng, &format!("{name}.attn.output"), rank, alpha);
    }
}

/// Fixed sinusoidal position table `[len × dim]`, starting at `offset`.
pub fn sinusoidal_positions(len: usize, dim: usize, offset: usize) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for p in 0..len {
        let pos = (p + offset) as f64;
        for i in 0..dim {
            let freq = libm::pow(10_000.0, -((i / 2 * 2) as f64) / dim as f64);
            let v = if i % 2 == 0 { libm::sin(pos * freq) } else { libm::cos(pos * freq) };
            m.set(p, i, v);
        }
    }
    m
}
